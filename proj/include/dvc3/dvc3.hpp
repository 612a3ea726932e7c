#pragma once

#include "dvc3/tensor.hpp"
#include "dvc3/autograd.hpp"
#include "dvc3/ops.hpp"
#include "dvc3/nn.hpp"
#include "dvc3/checkpoint.hpp"
#include "dvc3/conformer.hpp"
#include "dvc3/acoustic_model.hpp"
#include "dvc3/semantic_tokens.hpp"
#include "dvc3/probe.hpp"
#include "dvc3/context_lm.hpp"
#include "dvc3/audio.hpp"
#include "dvc3/stream_engine.hpp"
#include "dvc3/config.hpp"
#include "dvc3/pipeline.hpp"
