#pragma once

#include <stdexcept>
#include <string>

namespace noisetrap {

// Argument outside an operation's declared domain.
class invalid_argument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class corrupt_file : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class unsupported : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Disjoint-support assumption for clean/noise joints does not hold.
class assumption_violated : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs do not admit the requested parameterization (e.g. non-positive epsilon).
class ill_posed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class domain_error : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Training produced a non-finite loss or parameter.
class divergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Two metric series cannot be compared point by point.
class alignment_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw invalid_argument(what);
}

}  // namespace detail
}  // namespace noisetrap
