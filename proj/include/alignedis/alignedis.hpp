// Copyright 2026 The alignedis Authors
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

// Umbrella header.

#ifndef ALIGNEDIS_ALIGNEDIS_HPP_
#define ALIGNEDIS_ALIGNEDIS_HPP_

#include "alignedis/cluster_io.hpp"
#include "alignedis/clustering.hpp"
#include "alignedis/core.hpp"
#include "alignedis/detect.hpp"
#include "alignedis/generate.hpp"
#include "alignedis/harness.hpp"
#include "alignedis/reweight.hpp"
#include "alignedis/simenv.hpp"
#include "alignedis/stats.hpp"

#endif  // ALIGNEDIS_ALIGNEDIS_HPP_
