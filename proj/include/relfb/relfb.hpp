#pragma once

#include "relfb/acoustic.hpp"
#include "relfb/adam.hpp"
#include "relfb/analysis.hpp"
#include "relfb/autodiff.hpp"
#include "relfb/checkpoint.hpp"
#include "relfb/corpus.hpp"
#include "relfb/errors.hpp"
#include "relfb/fft.hpp"
#include "relfb/gradcheck.hpp"
#include "relfb/model.hpp"
#include "relfb/model_check.hpp"
#include "relfb/modulation.hpp"
#include "relfb/ops.hpp"
#include "relfb/rng.hpp"
#include "relfb/tensor.hpp"
#include "relfb/train.hpp"
#include "relfb/wav.hpp"

namespace relfb {
inline constexpr const char* kVersion = "0.1.0";
}
