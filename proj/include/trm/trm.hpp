#pragma once

// Transfer risk maps for segmentation fine-tuning: per-pixel LEEP
// transferability, exponential risk weighting, and the weighted training
// loops plus experiment matrix built on them.

#include "trm/adam.hpp"
#include "trm/checkpoint.hpp"
#include "trm/common.hpp"
#include "trm/dataio.hpp"
#include "trm/leep.hpp"
#include "trm/matrix.hpp"
#include "trm/phantom.hpp"
#include "trm/riskweight.hpp"
#include "trm/rng.hpp"
#include "trm/tensor.hpp"
#include "trm/train.hpp"
#include "trm/unet.hpp"
