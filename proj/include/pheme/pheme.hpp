#pragma once

#include "pheme/cohort.hpp"
#include "pheme/config.hpp"
#include "pheme/core.hpp"
#include "pheme/ensemble.hpp"
#include "pheme/experiment.hpp"
#include "pheme/metrics.hpp"
#include "pheme/models.hpp"
#include "pheme/nn/checkpoint.hpp"
#include "pheme/nn/network.hpp"
#include "pheme/nn/optim.hpp"
#include "pheme/preprocess.hpp"
#include "pheme/report.hpp"
