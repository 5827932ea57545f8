#pragma once

#include "cstnet/checkpoint.hpp"
#include "cstnet/csl.hpp"
#include "cstnet/data.hpp"
#include "cstnet/errors.hpp"
#include "cstnet/evaluate.hpp"
#include "cstnet/gradcheck.hpp"
#include "cstnet/layers.hpp"
#include "cstnet/metrics.hpp"
#include "cstnet/model.hpp"
#include "cstnet/ops.hpp"
#include "cstnet/sti.hpp"
#include "cstnet/tensor.hpp"
#include "cstnet/tensor_io.hpp"
#include "cstnet/training.hpp"
#include "cstnet/verify.hpp"
