#pragma once

#include "multirater/checkpoint.hpp"
#include "multirater/data.hpp"
#include "multirater/evaluate.hpp"
#include "multirater/gemm.hpp"
#include "multirater/layers.hpp"
#include "multirater/losses.hpp"
#include "multirater/metrics.hpp"
#include "multirater/morphology.hpp"
#include "multirater/network.hpp"
#include "multirater/pgm.hpp"
#include "multirater/rng.hpp"
#include "multirater/runconfig.hpp"
#include "multirater/tensor.hpp"
#include "multirater/training.hpp"
#include "multirater/variational.hpp"
