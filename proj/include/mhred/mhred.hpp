// Copyright 2026 The mhred Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "mhred/checkpoint.hpp"
#include "mhred/data.hpp"
#include "mhred/error.hpp"
#include "mhred/metrics.hpp"
#include "mhred/model.hpp"
#include "mhred/rnn.hpp"
#include "mhred/synth.hpp"
#include "mhred/tensor.hpp"
#include "mhred/trainer.hpp"

#define MHRED_VERSION "0.1.0"
