#include "m3/circuits/adapter.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstring>

namespace m3::circuits {

namespace {

void append_number(std::string& out, Real v) {
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::scientific, 17);
  out.append(buf.data(), r.ptr);
}

std::string sys_error(const std::string& what) { return what + ": " + std::strerror(errno); }

}  // namespace

std::string format_request(std::string_view circuit, std::span<const Real> physical) {
  std::string line = "SIM ";
  line += circuit;
  for (Real v : physical) {
    line += ' ';
    append_number(line, v);
  }
  return line;
}

std::vector<Real> parse_response(std::string_view line, int expected) {
  while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
  if (line.starts_with("ERR")) {
    auto msg = line.substr(3);
    if (!msg.empty() && msg.front() == ' ') msg.remove_prefix(1);
    throw AdapterError("simulator reported an error: " + std::string(msg));
  }
  if (!line.starts_with("OK")) throw AdapterError("malformed response: '" + std::string(line) + "'");
  std::vector<Real> values;
  const char* p = line.data() + 2;
  const char* end = line.data() + line.size();
  while (p < end) {
    if (*p == ' ' || *p == '\t') {
      ++p;
      continue;
    }
    Real v = 0;
    const auto r = std::from_chars(p, end, v);
    const bool token_end = r.ptr == end || *r.ptr == ' ' || *r.ptr == '\t';
    if (r.ec != std::errc() || !token_end) {
      throw AdapterError("malformed response: bad number in '" + std::string(line) + "'");
    }
    if (!std::isfinite(v)) throw AdapterError("simulator returned a non-finite metric");
    values.push_back(v);
    p = r.ptr;
  }
  if (static_cast<int>(values.size()) != expected) {
    throw AdapterError("protocol error: expected " + std::to_string(expected) + " metrics, got " +
                       std::to_string(values.size()));
  }
  return values;
}

ExternalAdapter::ExternalAdapter(std::string endpoint, std::chrono::milliseconds timeout)
    : endpoint_(std::move(endpoint)), timeout_(timeout) {
  if (endpoint_.starts_with("unix:")) {
    const auto path = endpoint_.substr(5);
    sockaddr_un addr{};
    if (path.size() >= sizeof(addr.sun_path)) throw AdapterError("socket path too long: " + path);
    const int fd = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw AdapterError(sys_error("socket"));
    addr.sun_family = AF_UNIX;
    std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      const auto msg = sys_error("connect to " + path);
      ::close(fd);
      throw AdapterError(msg);
    }
    read_fd_ = write_fd_ = fd;
    return;
  }
  int to_child[2], from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw AdapterError(sys_error("pipe"));
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw AdapterError(sys_error("pipe"));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw AdapterError(sys_error("fork"));
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", endpoint_.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  child_ = pid;
  write_fd_ = to_child[1];
  read_fd_ = from_child[0];
}

ExternalAdapter::~ExternalAdapter() { shutdown(); }

void ExternalAdapter::shutdown() {
  if (write_fd_ >= 0) ::close(write_fd_);
  if (read_fd_ >= 0 && read_fd_ != write_fd_) ::close(read_fd_);
  write_fd_ = read_fd_ = -1;
  if (child_ > 0) {
    ::kill(child_, SIGTERM);
    ::waitpid(child_, nullptr, 0);
    child_ = -1;
  }
}

void ExternalAdapter::write_line(const std::string& line) {
  if (write_fd_ < 0) throw AdapterError("adapter connection is closed");
  const std::string data = line + '\n';
  std::size_t done = 0;
  // Writing to a pipe whose reader died raises SIGPIPE; ignore it so the
  // failure comes back as EPIPE.
  struct sigaction ignore{}, old{};
  ignore.sa_handler = SIG_IGN;
  ::sigaction(SIGPIPE, &ignore, &old);
  while (done < data.size()) {
    const auto n = ::write(write_fd_, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const auto msg = sys_error("write to simulator");
      ::sigaction(SIGPIPE, &old, nullptr);
      throw AdapterError(msg);
    }
    done += static_cast<std::size_t>(n);
  }
  ::sigaction(SIGPIPE, &old, nullptr);
}

std::string ExternalAdapter::read_line() {
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  for (;;) {
    if (const auto nl = pending_.find('\n'); nl != std::string::npos) {
      auto line = pending_.substr(0, nl);
      pending_.erase(0, nl + 1);
      return line;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      throw AdapterError("simulator timed out after " + std::to_string(timeout_.count()) + " ms");
    }
    pollfd pfd{read_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, static_cast<int>(left.count()));
    if (ready < 0) {
      if (errno == EINTR) continue;
      throw AdapterError(sys_error("poll"));
    }
    if (ready == 0) continue;
    std::array<char, 4096> buf{};
    const auto n = ::read(read_fd_, buf.data(), buf.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw AdapterError(sys_error("read from simulator"));
    }
    if (n == 0) throw AdapterError("simulator closed the connection");
    pending_.append(buf.data(), static_cast<std::size_t>(n));
  }
}

std::vector<Real> ExternalAdapter::query(const CircuitDef& def, std::span<const Real> physical) {
  write_line(format_request(def.name, physical));
  return parse_response(read_line(), def.n_specs());
}

std::vector<Real> ExternalAdapter::simulate(const CircuitDef& def, std::span<const Real> p) {
  const auto x = denormalize(def, p);
  return query(def, x);
}

}  // namespace m3::circuits
