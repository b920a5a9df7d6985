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

#include <stdexcept>
#include <string>

namespace sarreg {

/// Raised when a caller breaks an operation's preconditions (shape mismatch,
/// out-of-range configuration, indivisible dimensions).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when the input is well-formed but carries no usable information,
/// e.g. an empty mask passed to a distance metric.
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A loss term evaluated to NaN or infinity. `component()` names the term.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::string component, double value)
      : std::runtime_error("non-finite loss in component '" + component +
                           "': " + std::to_string(value)),
        component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace sarreg
