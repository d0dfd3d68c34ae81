#pragma once

#include "srblab/core.hpp"
#include "srblab/pliss.hpp"
#include "srblab/systems.hpp"
#include "srblab/random.hpp"
#include "srblab/pesin.hpp"
#include "srblab/gibbs.hpp"
#include "srblab/manifest.hpp"
#include "srblab/config.hpp"
#include "srblab/pipelines.hpp"
