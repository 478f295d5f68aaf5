// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Tokenizers bound to a loaded checkpoint: raw bytes (id = byte value) and
// GPT-2 byte-level BPE read from vocab.json + merges.txt or tokenizer.json.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "outlierscope/common.hpp"

namespace outlierscope {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual TokenSequence encode(std::string_view text) const = 0;
  virtual std::string name() const = 0;
};

class ByteTokenizer final : public Tokenizer {
 public:
  TokenSequence encode(std::string_view text) const override {
    TokenSequence out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
    return out;
  }
  std::string name() const override { return "bytes"; }
};

class Gpt2BpeTokenizer final : public Tokenizer {
 public:
  Gpt2BpeTokenizer(std::unordered_map<std::string, int32_t> vocab, const std::vector<std::pair<std::string, std::string>>& merges)
      : vocab_(std::move(vocab)) {
    for (size_t i = 0; i < merges.size(); ++i) ranks_[merges[i].first + " " + merges[i].second] = static_cast<int>(i);
    // Byte -> printable code point table used by byte-level BPE vocabularies.
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<int> cs = bs;
    int n = 0;
    for (int b = 0; b < 256; ++b) {
      if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
        bs.push_back(b);
        cs.push_back(256 + n++);
      }
    }
    for (size_t i = 0; i < bs.size(); ++i) byte_to_unicode_[static_cast<size_t>(bs[i])] = utf8(cs[i]);
  }

  TokenSequence encode(std::string_view text) const override {
    TokenSequence out;
    for (const auto& word : pretokenize(text)) {
      std::vector<std::string> parts;
      for (unsigned char c : word) parts.push_back(byte_to_unicode_[c]);
      bpe(parts);
      for (const auto& p : parts) {
        auto it = vocab_.find(p);
        if (it == vocab_.end()) throw InvalidArgument("BPE produced a piece missing from the vocabulary");
        out.push_back(it->second);
      }
    }
    return out;
  }

  std::string name() const override { return "gpt2-bpe"; }

 private:
  static std::string utf8(int cp) {
    std::string s;
    if (cp < 0x80) {
      s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
    return s;
  }

  // ASCII approximation of the GPT-2 split pattern: contractions, optional
  // leading space + letters, + digits, + other symbols, and whitespace runs.
  static std::vector<std::string> pretokenize(std::string_view text) {
    auto is_alpha = [](unsigned char c) { return std::isalpha(c) || c >= 0x80; };
    auto is_digit = [](unsigned char c) { return std::isdigit(c) != 0; };
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
      const auto c = static_cast<unsigned char>(text[i]);
      if (c == '\'') {
        for (std::string_view suf : {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"}) {
          if (text.substr(i, suf.size()) == suf) {
            out.emplace_back(suf);
            i += suf.size();
            goto next;
          }
        }
      }
      {
        size_t j = i;
        if (c == ' ' && i + 1 < text.size() && !is_space(static_cast<unsigned char>(text[i + 1]))) ++j;
        const auto head = static_cast<unsigned char>(text[j]);
        if (is_alpha(head)) {
          while (j < text.size() && is_alpha(static_cast<unsigned char>(text[j]))) ++j;
        } else if (is_digit(head)) {
          while (j < text.size() && is_digit(static_cast<unsigned char>(text[j]))) ++j;
        } else if (!is_space(head)) {
          while (j < text.size()) {
            const auto d = static_cast<unsigned char>(text[j]);
            if (is_space(d) || is_alpha(d) || is_digit(d)) break;
            ++j;
          }
        } else {
          // Whitespace run; leave the last space to prefix the next word.
          while (j < text.size() && is_space(static_cast<unsigned char>(text[j]))) ++j;
          if (j < text.size() && j - i > 1 && text[j - 1] == ' ') --j;
        }
        out.emplace_back(text.substr(i, j - i));
        i = j;
      }
    next:;
    }
    return out;
  }

  void bpe(std::vector<std::string>& parts) const {
    while (parts.size() > 1) {
      int best = -1;
      size_t at = 0;
      for (size_t k = 0; k + 1 < parts.size(); ++k) {
        auto it = ranks_.find(parts[k] + " " + parts[k + 1]);
        if (it != ranks_.end() && (best < 0 || it->second < best)) {
          best = it->second;
          at = k;
        }
      }
      if (best < 0) break;
      parts[at] += parts[at + 1];
      parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(at) + 1);
    }
  }

  std::unordered_map<std::string, int32_t> vocab_;
  std::unordered_map<std::string, int> ranks_;
  std::array<std::string, 256> byte_to_unicode_;
};

/// Picks the tokenizer shipped with a checkpoint directory. A config key
/// "outlierscope_tokenizer": "bytes" selects the byte tokenizer.
inline std::unique_ptr<Tokenizer> load_tokenizer(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir / "config.json")) {
    std::ifstream in(dir / "config.json");
    const auto cfg = nlohmann::json::parse(in, nullptr, false);
    if (!cfg.is_discarded() && cfg.value("outlierscope_tokenizer", "") == "bytes") return std::make_unique<ByteTokenizer>();
  }
  std::unordered_map<std::string, int32_t> vocab;
  std::vector<std::pair<std::string, std::string>> merges;
  if (fs::exists(dir / "vocab.json") && fs::exists(dir / "merges.txt")) {
    std::ifstream vin(dir / "vocab.json");
    for (const auto& [k, v] : nlohmann::json::parse(vin).items()) vocab[k] = v.get<int32_t>();
    std::ifstream min(dir / "merges.txt");
    std::string line;
    while (std::getline(min, line)) {
      if (line.empty() || line.rfind("#version", 0) == 0) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) continue;
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
  } else if (fs::exists(dir / "tokenizer.json")) {
    std::ifstream tin(dir / "tokenizer.json");
    const auto tj = nlohmann::json::parse(tin);
    const auto& model = tj.at("model");
    if (model.value("type", "") != "BPE") throw LoadError("only byte-level BPE tokenizer.json is supported");
    for (const auto& [k, v] : model.at("vocab").items()) vocab[k] = v.get<int32_t>();
    for (const auto& m : model.at("merges")) {
      if (m.is_string()) {
        const auto s = m.get<std::string>();
        const auto sp = s.find(' ');
        merges.emplace_back(s.substr(0, sp), s.substr(sp + 1));
      } else {
        merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
      }
    }
  } else {
    throw LoadError("no tokenizer found in " + dir.string() + " (pass pre-tokenized input instead)");
  }
  return std::make_unique<Gpt2BpeTokenizer>(std::move(vocab), merges);
}

}  // namespace outlierscope
