#pragma once

// Umbrella header for the full pipeline.

#include "retloc/checkpoint.hpp"
#include "retloc/coarse.hpp"
#include "retloc/config.hpp"
#include "retloc/dataset.hpp"
#include "retloc/errors.hpp"
#include "retloc/eval.hpp"
#include "retloc/fine.hpp"
#include "retloc/gradcheck.hpp"
#include "retloc/geometry.hpp"
#include "retloc/instance_encoder.hpp"
#include "retloc/language.hpp"
#include "retloc/model_io.hpp"
#include "retloc/optimizer.hpp"
#include "retloc/params.hpp"
#include "retloc/random.hpp"
#include "retloc/scene.hpp"
#include "retloc/scene_io.hpp"
#include "retloc/scene_synth.hpp"
#include "retloc/tensor.hpp"
#include "retloc/train.hpp"
