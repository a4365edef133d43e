#pragma once

// Umbrella header for the whole library.

#include "retina/checkpoint.hpp"
#include "retina/commands.hpp"
#include "retina/config.hpp"
#include "retina/core.hpp"
#include "retina/data.hpp"
#include "retina/geometry.hpp"
#include "retina/image.hpp"
#include "retina/keypoints.hpp"
#include "retina/losses.hpp"
#include "retina/nn/model.hpp"
#include "retina/nn/ops.hpp"
#include "retina/nn/tape.hpp"
#include "retina/plot.hpp"
#include "retina/registration.hpp"
#include "retina/serve.hpp"
#include "retina/training.hpp"
