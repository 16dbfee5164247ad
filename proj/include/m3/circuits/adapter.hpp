#pragma once

#include <chrono>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3/circuits/circuits.hpp"

namespace m3::circuits {

class AdapterError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Line protocol spoken with an external simulator:
//   request   SIM <circuit> <x_1> ... <x_N>
//   response  OK <m_1> ... <m_K>   |   ERR <message>
// Numbers are written in scientific notation with a '.' decimal point
// regardless of the process locale.
std::string format_request(std::string_view circuit, std::span<const Real> physical);
// Parses one response line; throws AdapterError on ERR, malformed input,
// a count other than `expected`, or a non-finite value.
std::vector<Real> parse_response(std::string_view line, int expected);

// Talks to a simulator over newline-delimited text. The endpoint is either
// "unix:<path>" for a local stream socket or a shell command whose stdin and
// stdout carry the protocol. One request is in flight at a time.
class ExternalAdapter : public Simulator {
public:
  explicit ExternalAdapter(std::string endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ~ExternalAdapter() override;
  ExternalAdapter(const ExternalAdapter&) = delete;
  ExternalAdapter& operator=(const ExternalAdapter&) = delete;

  std::vector<Real> query(const CircuitDef& def, std::span<const Real> physical);
  std::vector<Real> simulate(const CircuitDef& def, std::span<const Real> p) override;

  const std::string& endpoint() const { return endpoint_; }

private:
  void write_line(const std::string& line);
  std::string read_line();
  void shutdown();

  std::string endpoint_;
  std::chrono::milliseconds timeout_;
  int write_fd_ = -1;
  int read_fd_ = -1;
  int child_ = -1;
  std::string pending_;
};

}  // namespace m3::circuits
