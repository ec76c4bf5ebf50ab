// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "circuitlab/batching.hpp"
#include "circuitlab/checkpoint.hpp"
#include "circuitlab/config.hpp"
#include "circuitlab/error.hpp"
#include "circuitlab/masking.hpp"
#include "circuitlab/model_config.hpp"
#include "circuitlab/objectives.hpp"
#include "circuitlab/ops.hpp"
#include "circuitlab/optim.hpp"
#include "circuitlab/pipeline.hpp"
#include "circuitlab/serialize.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/tensor.hpp"
#include "circuitlab/trainer.hpp"
#include "circuitlab/transformer.hpp"
#include "circuitlab/units.hpp"
#include "circuitlab/util.hpp"
#include "circuitlab/validation.hpp"
