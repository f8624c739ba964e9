// Copyright 2026 The dmel authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "dmel/audio.hpp"
#include "dmel/codec.hpp"
#include "dmel/dsp.hpp"
#include "dmel/errors.hpp"
#include "dmel/metrics.hpp"
#include "dmel/model.hpp"
#include "dmel/rng.hpp"
#include "dmel/sequence.hpp"
#include "dmel/tensor.hpp"
#include "dmel/token_io.hpp"
#include "dmel/train.hpp"
