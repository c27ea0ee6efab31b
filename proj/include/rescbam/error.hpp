// Copyright 2026 The ResCBAM-Det Authors.
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

#include <stdexcept>
#include <string>

namespace rescbam {

/// Failure categories. They map one-to-one onto the C API status codes and
/// the CLI exit codes.
enum class Errc {
  invalid_argument = 1,  // bad call, bad config, bad shape
  data = 2,              // unreadable or malformed input files
  check_failed = 3,      // a verification harness reported a failure
  internal = 4,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(const std::string& what) { throw Error(Errc::invalid_argument, what); }
[[noreturn]] inline void fail_data(const std::string& what) { throw Error(Errc::data, what); }

}  // namespace rescbam
