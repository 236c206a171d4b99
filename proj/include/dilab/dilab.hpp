// Umbrella header.
#pragma once

#include "dilab/common.hpp"
#include "dilab/config.hpp"
#include "dilab/core.hpp"
#include "dilab/datagen.hpp"
#include "dilab/dre.hpp"
#include "dilab/hfunction.hpp"
#include "dilab/losses.hpp"
#include "dilab/optim.hpp"
#include "dilab/policy.hpp"
#include "dilab/tabular.hpp"
#include "dilab/trainer.hpp"
#include "dilab/verify.hpp"
