#pragma once

#include "smart/tensor.hpp"
#include "smart/ops.hpp"
#include "smart/optim.hpp"
#include "smart/data.hpp"
#include "smart/masking.hpp"
#include "smart/synthetic.hpp"
#include "smart/metrics.hpp"
#include "smart/config.hpp"
#include "smart/encoder.hpp"
#include "smart/mart_block.hpp"
#include "smart/model.hpp"
#include "smart/training.hpp"
#include "smart/checkpoint.hpp"
#include "smart/experiment.hpp"
#include "smart/platform.hpp"
