// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing,
// software distributed under the License is distributed on an
// "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, either express or implied.  See the License for the
// specific language governing permissions and limitations
// under the License.

#pragma once

// Everything but the HTTP service and CLI, which pull in heavier headers.
#include "costflow/asset_graph.hpp"
#include "costflow/backends.hpp"
#include "costflow/cost.hpp"
#include "costflow/crawl.hpp"
#include "costflow/crawl_workload.hpp"
#include "costflow/engine.hpp"
#include "costflow/error.hpp"
#include "costflow/factory.hpp"
#include "costflow/hash.hpp"
#include "costflow/money.hpp"
#include "costflow/pipeline_file.hpp"
#include "costflow/step_protocol.hpp"
