#pragma once

#include "recall/error.hpp"
#include "recall/tensor.hpp"
#include "recall/rng.hpp"
#include "recall/parallel.hpp"
#include "recall/checkpoint.hpp"
#include "recall/model.hpp"
#include "recall/dataset.hpp"
#include "recall/eval.hpp"
#include "recall/representation.hpp"
#include "recall/typical.hpp"
#include "recall/similarity.hpp"
#include "recall/merge.hpp"
#include "recall/bench.hpp"

namespace recall {
inline constexpr const char* kVersion = "0.1.0";
}  // namespace recall
