#pragma once

// Umbrella header for the whole codec library.

#include "oscar/checkpoint.hpp"
#include "oscar/codec.hpp"
#include "oscar/config.hpp"
#include "oscar/diagnostics.hpp"
#include "oscar/diffusion.hpp"
#include "oscar/error.hpp"
#include "oscar/image.hpp"
#include "oscar/losses.hpp"
#include "oscar/model.hpp"
#include "oscar/networks.hpp"
#include "oscar/nn.hpp"
#include "oscar/ops.hpp"
#include "oscar/optim.hpp"
#include "oscar/rate.hpp"
#include "oscar/rng.hpp"
#include "oscar/tensor.hpp"
#include "oscar/training.hpp"
#include "oscar/vq.hpp"
