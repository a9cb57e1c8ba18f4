#pragma once

#include "csamoe/errors.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/parallel.hpp"
#include "csamoe/tensor.hpp"
#include "csamoe/ops.hpp"
#include "csamoe/layers.hpp"
#include "csamoe/image.hpp"
#include "csamoe/image_io.hpp"
#include "csamoe/backbone.hpp"
#include "csamoe/csa.hpp"
#include "csamoe/moe.hpp"
#include "csamoe/dataset.hpp"
#include "csamoe/metrics.hpp"
#include "csamoe/training.hpp"
#include "csamoe/checkpoint.hpp"
#include "csamoe/config.hpp"
#include "csamoe/gradcheck.hpp"
