#pragma once

#include "noseprint/augment.hpp"
#include "noseprint/checkpoint.hpp"
#include "noseprint/embed.hpp"
#include "noseprint/errors.hpp"
#include "noseprint/image.hpp"
#include "noseprint/losses.hpp"
#include "noseprint/manifest.hpp"
#include "noseprint/model.hpp"
#include "noseprint/plan.hpp"
#include "noseprint/retrieval.hpp"
#include "noseprint/rng.hpp"
#include "noseprint/synth.hpp"
#include "noseprint/tensor.hpp"
#include "noseprint/trainer.hpp"
