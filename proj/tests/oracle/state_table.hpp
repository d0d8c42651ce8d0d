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

// Hand-written transition table for step attempts, keyed by state and event
// names. Absent entries are illegal.

#include <map>
#include <optional>
#include <string>
#include <utility>

namespace oracle {

inline const std::map<std::pair<std::string, std::string>, std::string>& TransitionTable() {
  static const std::map<std::pair<std::string, std::string>, std::string> table = {
      {{"QUEUED", "LAUNCH"}, "LAUNCHING"},
      {{"QUEUED", "CANCEL"}, "CANCELED"},
      {{"LAUNCHING", "START"}, "RUNNING"},
      {{"LAUNCHING", "CANCEL"}, "CANCELED"},
      {{"RUNNING", "SUCCEED"}, "SUCCESS"},
      {{"RUNNING", "FAIL"}, "FAILURE"},
      {{"RUNNING", "HEARTBEAT_TIMEOUT"}, "FAILURE"},
      {{"RUNNING", "CANCEL"}, "CANCELED"},
  };
  return table;
}

inline std::optional<std::string> ExpectedNext(const std::string& state, const std::string& event) {
  auto it = TransitionTable().find({state, event});
  if (it == TransitionTable().end()) return std::nullopt;
  return it->second;
}

}  // namespace oracle
