// SPDX-License-Identifier: Apache-2.0
#pragma once

// Text rewriters: prompt in, response out. Wire format for external
// rewriters is one JSON object per line, {"prompt": str} -> {"text": str},
// either over a child process's stdio or as an HTTP POST body.

#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "damoc/error.hpp"

namespace damoc::rewrite {

class Rewriter {
public:
    virtual ~Rewriter() = default;
    virtual std::string rewrite(const std::string& prompt) = 0;
};

class FunctionRewriter final : public Rewriter {
public:
    explicit FunctionRewriter(std::function<std::string(const std::string&)> fn) : fn_(std::move(fn)) {}
    std::string rewrite(const std::string& prompt) override { return fn_(prompt); }

private:
    std::function<std::string(const std::string&)> fn_;
};

inline std::string encode_request(const std::string& prompt) { return nlohmann::json{{"prompt", prompt}}.dump(); }

inline std::string decode_response(std::string_view body) {
    try {
        auto j = nlohmann::json::parse(body);
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
            throw TransportError("rewriter response lacks a string \"text\" field");
        return j["text"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw TransportError(std::string("rewriter response is not JSON: ") + e.what());
    }
}

/// POSTs {"prompt"} to a URL such as http://127.0.0.1:8080/rewrite.
class HttpRewriter final : public Rewriter {
public:
    explicit HttpRewriter(const std::string& url, int timeout_s = 120) {
        const std::string scheme = "http://";
        if (url.rfind(scheme, 0) != 0) throw ConfigError("rewriter url must start with http://: " + url);
        const auto slash = url.find('/', scheme.size());
        host_port_ = url.substr(0, slash == std::string::npos ? url.size() : slash);
        path_ = slash == std::string::npos ? "/" : url.substr(slash);
        client_ = std::make_unique<httplib::Client>(host_port_);
        client_->set_read_timeout(timeout_s, 0);
        client_->set_write_timeout(timeout_s, 0);
    }

    std::string rewrite(const std::string& prompt) override {
        auto res = client_->Post(path_, encode_request(prompt), "application/json");
        if (!res) throw TransportError("rewriter at " + host_port_ + path_ + ": " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw TransportError("rewriter at " + host_port_ + path_ + " returned HTTP " + std::to_string(res->status));
        return decode_response(res->body);
    }

private:
    std::string host_port_;
    std::string path_;
    std::unique_ptr<httplib::Client> client_;
};

/// Spawns argv once and exchanges one JSON line per request over its stdio.
class ProcessRewriter final : public Rewriter {
public:
    explicit ProcessRewriter(std::vector<std::string> argv) : argv_(std::move(argv)) {
        if (argv_.empty()) throw ConfigError("rewriter command is empty");
        int sv[2];
        if (::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) != 0)
            throw TransportError(std::string("socketpair: ") + std::strerror(errno));
        pid_ = ::fork();
        if (pid_ < 0) throw TransportError(std::string("fork: ") + std::strerror(errno));
        if (pid_ == 0) {
            ::close(sv[0]);
            ::dup2(sv[1], 0);
            ::dup2(sv[1], 1);
            ::close(sv[1]);
            std::vector<char*> args;
            for (auto& a : argv_) args.push_back(a.data());
            args.push_back(nullptr);
            ::execvp(args[0], args.data());
            ::_exit(127);
        }
        ::close(sv[1]);
        fd_ = sv[0];
    }

    ProcessRewriter(const ProcessRewriter&) = delete;
    ProcessRewriter& operator=(const ProcessRewriter&) = delete;

    ~ProcessRewriter() override {
        if (fd_ >= 0) ::close(fd_);
        if (pid_ > 0) {
            int st = 0;
            ::waitpid(pid_, &st, 0);
        }
    }

    std::string rewrite(const std::string& prompt) override {
        std::string line = encode_request(prompt) + "\n";
        std::size_t off = 0;
        while (off < line.size()) {
            const auto w = ::send(fd_, line.data() + off, line.size() - off, MSG_NOSIGNAL);
            if (w < 0) {
                if (errno == EINTR) continue;
                throw TransportError("rewriter process '" + argv_[0] + "': write failed: " + std::strerror(errno));
            }
            off += static_cast<std::size_t>(w);
        }
        for (;;) {
            if (auto nl = buf_.find('\n'); nl != std::string::npos) {
                std::string reply = buf_.substr(0, nl);
                buf_.erase(0, nl + 1);
                return decode_response(reply);
            }
            char tmp[4096];
            const auto r = ::recv(fd_, tmp, sizeof tmp, 0);
            if (r < 0 && errno == EINTR) continue;
            if (r <= 0) throw TransportError("rewriter process '" + argv_[0] + "' closed its output");
            buf_.append(tmp, static_cast<std::size_t>(r));
        }
    }

private:
    std::vector<std::string> argv_;
    pid_t pid_ = -1;
    int fd_ = -1;
    std::string buf_;
};

/// "http://..." selects HTTP; "exec:<cmd> [args...]" spawns a process
/// (arguments split on spaces).
inline std::unique_ptr<Rewriter> make_rewriter(const std::string& endpoint) {
    if (endpoint.rfind("http://", 0) == 0) return std::make_unique<HttpRewriter>(endpoint);
    if (endpoint.rfind("exec:", 0) == 0) {
        std::vector<std::string> argv;
        std::string cur;
        for (char c : endpoint.substr(5)) {
            if (c == ' ') {
                if (!cur.empty()) argv.push_back(std::move(cur));
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!cur.empty()) argv.push_back(std::move(cur));
        return std::make_unique<ProcessRewriter>(std::move(argv));
    }
    throw ConfigError("unsupported rewriter endpoint '" + endpoint + "' (expected http://... or exec:...)");
}

}  // namespace damoc::rewrite
