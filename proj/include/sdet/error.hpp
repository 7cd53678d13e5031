#pragma once

#include <stdexcept>
#include <string>

namespace sdet {

// Error carried by every failure path. `code` is a stable machine-readable
// identifier (the CLI maps it into its JSON error envelope), `context` is
// free-form detail such as a file path or an offending shape.
class Error : public std::runtime_error {
 public:
  Error(std::string code, std::string message, std::string context = "")
      : std::runtime_error(message + (context.empty() ? "" : " [" + context + "]")),
        code_(std::move(code)),
        message_(std::move(message)),
        context_(std::move(context)) {}

  const std::string& code() const { return code_; }
  const std::string& message() const { return message_; }
  const std::string& context() const { return context_; }

 private:
  std::string code_;
  std::string message_;
  std::string context_;
};

[[noreturn]] inline void fail(std::string code, std::string message, std::string context = "") {
  throw Error(std::move(code), std::move(message), std::move(context));
}

}  // namespace sdet
