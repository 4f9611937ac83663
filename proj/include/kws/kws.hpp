#pragma once

// Umbrella header for the keyword-spotting embedding toolkit.

#include "kws/audio.hpp"
#include "kws/checkpoint.hpp"
#include "kws/common.hpp"
#include "kws/dataset.hpp"
#include "kws/encoder.hpp"
#include "kws/evalkit.hpp"
#include "kws/features.hpp"
#include "kws/graph.hpp"
#include "kws/loss.hpp"
#include "kws/quant.hpp"
#include "kws/runtime.hpp"
#include "kws/svg.hpp"
#include "kws/synth.hpp"
#include "kws/tensor.hpp"
#include "kws/trainer.hpp"
