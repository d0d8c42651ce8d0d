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

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace costflow {

enum class Errc {
  kDuplicateAsset,
  kUnknownDependency,
  kCycleDetected,
  kPartitionMismatch,
  kMalformedPayload,
  kMalformedEvent,
  kBackendUnavailable,
  kInvalidSpec,
  kUnknownHandle,
  kUnknownBackend,
  kEmptyRegistry,
  kNegativeDuration,
  kNegativeComponent,
  kEmptyRun,
  kZeroDenominator,
  kEmptyInput,
  kEmptySelection,
  kIllegalTransition,
  kUnknownRun,
  kAlreadyTerminal,
  kEmptyRange,
  kFileNotFound,
  kParseError,
  kInvalidConfig,
  kPortInUse,
  kInvalidArgument,
};

constexpr std::string_view ErrcName(Errc code) {
  switch (code) {
    case Errc::kDuplicateAsset: return "DuplicateAsset";
    case Errc::kUnknownDependency: return "UnknownDependency";
    case Errc::kCycleDetected: return "CycleDetected";
    case Errc::kPartitionMismatch: return "PartitionMismatch";
    case Errc::kMalformedPayload: return "MalformedPayload";
    case Errc::kMalformedEvent: return "MalformedEvent";
    case Errc::kBackendUnavailable: return "BackendUnavailable";
    case Errc::kInvalidSpec: return "InvalidSpec";
    case Errc::kUnknownHandle: return "UnknownHandle";
    case Errc::kUnknownBackend: return "UnknownBackend";
    case Errc::kEmptyRegistry: return "EmptyRegistry";
    case Errc::kNegativeDuration: return "NegativeDuration";
    case Errc::kNegativeComponent: return "NegativeComponent";
    case Errc::kEmptyRun: return "EmptyRun";
    case Errc::kZeroDenominator: return "ZeroDenominator";
    case Errc::kEmptyInput: return "EmptyInput";
    case Errc::kEmptySelection: return "EmptySelection";
    case Errc::kIllegalTransition: return "IllegalTransition";
    case Errc::kUnknownRun: return "UnknownRun";
    case Errc::kAlreadyTerminal: return "AlreadyTerminal";
    case Errc::kEmptyRange: return "EmptyRange";
    case Errc::kFileNotFound: return "FileNotFound";
    case Errc::kParseError: return "ParseError";
    case Errc::kInvalidConfig: return "InvalidConfig";
    case Errc::kPortInUse: return "PortInUse";
    case Errc::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

// Base of every error the library throws. The message is prefixed with the
// stable error name so CLI diagnostics and API bodies can be grepped.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(ErrcName(code)) + (detail.empty() ? "" : ": " + detail)),
        code_(code),
        detail_(detail) {}

  Errc code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

class CycleError : public Error {
 public:
  explicit CycleError(std::vector<std::string> path)
      : Error(Errc::kCycleDetected, Join(path)), path_(std::move(path)) {}

  const std::vector<std::string>& path() const noexcept { return path_; }

 private:
  static std::string Join(const std::vector<std::string>& path) {
    std::string out;
    for (const auto& name : path) {
      if (!out.empty()) out += " -> ";
      out += name;
    }
    return out;
  }

  std::vector<std::string> path_;
};

}  // namespace costflow
