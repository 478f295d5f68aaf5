// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Activation dumps, the append-only run ledger, and CSV/JSON report writers.
//
// Activation dump layout (all integers little-endian):
//   bytes 0..7   magic "OSDUMP01"
//   bytes 8..15  u64 header length H
//   next H bytes UTF-8 JSON header:
//     {"model_id", "pass_id", "dtype": "float32",
//      "tensors": [{"tap": "y6@0", "pass_id", "shape": [tokens, channels],
//                   "offset": <bytes from payload start>, "nbytes"}]}
//   payload      row-major float32 tensors, back to back in header order

#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "outlierscope/activation.hpp"

namespace outlierscope {

inline constexpr char kDumpMagic[8] = {'O', 'S', 'D', 'U', 'M', 'P', '0', '1'};

struct ActivationDump {
  std::string model_id;
  std::string pass_id;
  std::vector<ActivationSnapshot> snapshots;
};

inline void write_activation_dump(const std::filesystem::path& path, const ActivationDump& dump) {
  nlohmann::json header = {{"model_id", dump.model_id}, {"pass_id", dump.pass_id}, {"dtype", "float32"}};
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& s : dump.snapshots) {
    const uint64_t nbytes = static_cast<uint64_t>(s.values.size()) * sizeof(float);
    tensors.push_back({{"tap", s.tap.to_string()},
                       {"pass_id", s.pass_id},
                       {"shape", {s.values.rows(), s.values.cols()}},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write dump " + path.string());
  out.write(kDumpMagic, 8);
  const uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& s : dump.snapshots)
    out.write(reinterpret_cast<const char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * sizeof(float)));
  if (!out) throw Error("write failed for dump " + path.string());
}

inline ActivationDump read_activation_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open dump " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kDumpMagic, 8) != 0) throw LoadError(path.string() + " is not an activation dump");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || len > (1ull << 30)) throw LoadError("bad dump header length in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw LoadError("truncated dump header in " + path.string());
  ActivationDump dump;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("dtype").get<std::string>() != "float32") throw LoadError("unsupported dump dtype");
    dump.model_id = header.at("model_id").get<std::string>();
    dump.pass_id = header.at("pass_id").get<std::string>();
    const auto base = static_cast<std::streamoff>(16 + len);
    for (const auto& t : header.at("tensors")) {
      const auto shape = t.at("shape").get<std::vector<int64_t>>();
      if (shape.size() != 2) throw LoadError("dump tensor must be 2-D");
      ActivationSnapshot s{TapPoint::parse(t.at("tap").get<std::string>()), Matrix(shape[0], shape[1]),
                           t.at("pass_id").get<std::string>()};
      const auto nbytes = t.at("nbytes").get<uint64_t>();
      if (nbytes != static_cast<uint64_t>(s.values.size()) * sizeof(float)) throw LoadError("dump tensor size mismatch");
      in.seekg(base + static_cast<std::streamoff>(t.at("offset").get<uint64_t>()));
      in.read(reinterpret_cast<char*>(s.values.data()), static_cast<std::streamsize>(nbytes));
      if (!in) throw LoadError("truncated dump payload in " + path.string());
      dump.snapshots.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed dump header: ") + e.what());
  }
  return dump;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunLedgerEntry {
  std::string timestamp;
  std::string command;
  std::string config_digest;
  std::string model_id;
  std::string plan_digest = "baseline";
  nlohmann::json result = nlohmann::json::object();
  std::vector<std::string> artifacts;
  int exit_code = 0;
  nlohmann::json replay = nlohmann::json::object();  // everything `replay` needs
};

inline nlohmann::json to_json(const RunLedgerEntry& e) {
  return {{"timestamp", e.timestamp}, {"command", e.command},       {"config_digest", e.config_digest},
          {"model_id", e.model_id},   {"plan_digest", e.plan_digest}, {"result", e.result},
          {"artifacts", e.artifacts}, {"exit_code", e.exit_code},   {"replay", e.replay}};
}

inline RunLedgerEntry ledger_entry_from_json(const nlohmann::json& j) {
  RunLedgerEntry e;
  e.timestamp = j.value("timestamp", "");
  e.command = j.value("command", "");
  e.config_digest = j.value("config_digest", "");
  e.model_id = j.value("model_id", "");
  e.plan_digest = j.value("plan_digest", "baseline");
  e.result = j.value("result", nlohmann::json::object());
  e.artifacts = j.value("artifacts", std::vector<std::string>{});
  e.exit_code = j.value("exit_code", 0);
  e.replay = j.value("replay", nlohmann::json::object());
  return e;
}

/// Appends one JSON line under an exclusive advisory lock.
inline void append_ledger_entry(const std::filesystem::path& path, const RunLedgerEntry& entry) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string line = to_json(entry).dump() + "\n";
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw Error("cannot open ledger " + path.string());
  ::flock(fd, LOCK_EX);
  size_t done = 0;
  bool ok = true;
  while (done < line.size()) {
    const auto n = ::write(fd, line.data() + done, line.size() - done);
    if (n <= 0) {
      ok = false;
      break;
    }
    done += static_cast<size_t>(n);
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (!ok) throw Error("write failed for ledger " + path.string());
}

inline std::vector<RunLedgerEntry> read_ledger(const std::filesystem::path& path) {
  std::vector<RunLedgerEntry> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(ledger_entry_from_json(nlohmann::json::parse(line)));
  return out;
}

/// Tracks files written by one command and deletes them unless committed.
class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir) : dir_(std::move(dir)) {}
  OutputSet(const OutputSet&) = delete;
  OutputSet& operator=(const OutputSet&) = delete;
  ~OutputSet() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : written_) std::filesystem::remove(p, ec);
  }

  std::filesystem::path path(const std::string& name) {
    std::filesystem::create_directories(dir_);
    written_.push_back(dir_ / name);
    return written_.back();
  }

  void write_json(const std::string& name, const nlohmann::json& j) {
    const auto p = path(name);
    std::ofstream out(p);
    out << j.dump(2) << "\n";
    if (!out) throw Error("write failed for " + p.string());
  }

  void write_csv(const std::string& name, const std::vector<std::string>& header,
                 const std::vector<std::vector<std::string>>& rows) {
    const auto p = path(name);
    std::ofstream out(p);
    auto emit = [&](const std::vector<std::string>& r) {
      for (size_t i = 0; i < r.size(); ++i) {
        if (i) out << ',';
        const bool quote = r[i].find_first_of(",\"\n") != std::string::npos;
        if (!quote) {
          out << r[i];
          continue;
        }
        out << '"';
        for (char c : r[i]) {
          if (c == '"') out << '"';
          out << c;
        }
        out << '"';
      }
      out << '\n';
    };
    emit(header);
    for (const auto& r : rows) emit(r);
    if (!out) throw Error("write failed for " + p.string());
  }

  void commit() { committed_ = true; }
  std::vector<std::string> artifact_names() const {
    std::vector<std::string> out;
    for (const auto& p : written_) out.push_back(p.string());
    return out;
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> written_;
  bool committed_ = false;
};

/// Shortest round-trip text for a float.
inline std::string fmt_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace outlierscope
