#pragma once

#include "smsr/autodiff.hpp"
#include "smsr/conv.hpp"
#include "smsr/gemm.hpp"
#include "smsr/image_io.hpp"
#include "smsr/image_ops.hpp"
#include "smsr/masks.hpp"
#include "smsr/metrics.hpp"
#include "smsr/model.hpp"
#include "smsr/profiler.hpp"
#include "smsr/serialize.hpp"
#include "smsr/sparse_exec.hpp"
#include "smsr/synth.hpp"
#include "smsr/tensor.hpp"
#include "smsr/trainer.hpp"
