#pragma once

#include "skipgs/densify.hpp"
#include "skipgs/error.hpp"
#include "skipgs/gating.hpp"
#include "skipgs/image.hpp"
#include "skipgs/losses.hpp"
#include "skipgs/model.hpp"
#include "skipgs/optim.hpp"
#include "skipgs/parallel.hpp"
#include "skipgs/renderer.hpp"
#include "skipgs/scene.hpp"
#include "skipgs/trainer.hpp"
