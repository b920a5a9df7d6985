// Copyright 2026 The sarreg Authors
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

// Umbrella header for the whole library.

#include "sarreg/error.hpp"
#include "sarreg/rng.hpp"
#include "sarreg/tensor.hpp"
#include "sarreg/sampling.hpp"
#include "sarreg/similarity.hpp"
#include "sarreg/ops.hpp"
#include "sarreg/imagecore.hpp"
#include "sarreg/metrics.hpp"
#include "sarreg/io.hpp"
#include "sarreg/params.hpp"
#include "sarreg/segmentation.hpp"
#include "sarreg/perceptual.hpp"
#include "sarreg/networks.hpp"
#include "sarreg/losses.hpp"
#include "sarreg/training.hpp"
#include "sarreg/transfer.hpp"
#include "sarreg/domains.hpp"
#include "sarreg/experiment.hpp"
