#pragma once

#include "scan/checkpoint.hpp"
#include "scan/config.hpp"
#include "scan/data.hpp"
#include "scan/distill.hpp"
#include "scan/errors.hpp"
#include "scan/inference.hpp"
#include "scan/io.hpp"
#include "scan/kernels.hpp"
#include "scan/metrics.hpp"
#include "scan/model.hpp"
#include "scan/ops.hpp"
#include "scan/optim.hpp"
#include "scan/random.hpp"
#include "scan/tensor.hpp"
#include "scan/threshold_search.hpp"
#include "scan/trainer.hpp"
