#pragma once

// Umbrella header for the library. The command-line front end lives in
// cmreid/cli.hpp and additionally needs CLI11.

#include "cmreid/autodiff.hpp"
#include "cmreid/config.hpp"
#include "cmreid/data/augment.hpp"
#include "cmreid/data/dataset.hpp"
#include "cmreid/data/embedding_dump.hpp"
#include "cmreid/data/manifest.hpp"
#include "cmreid/data/synth.hpp"
#include "cmreid/embed.hpp"
#include "cmreid/encoder.hpp"
#include "cmreid/error.hpp"
#include "cmreid/eval.hpp"
#include "cmreid/functions.hpp"
#include "cmreid/grad_check.hpp"
#include "cmreid/grad_suite.hpp"
#include "cmreid/losses.hpp"
#include "cmreid/sampler.hpp"
#include "cmreid/tensor.hpp"
#include "cmreid/text_io.hpp"
#include "cmreid/trainer.hpp"
#include "cmreid/types.hpp"
