// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Seeded pseudo-English text for the desk fixture. The lexicon is fixed so
// every corpus generated from it shares one alphabet and one word list; only
// the text seed varies between training, evaluation and C4-style documents.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "outlierscope/random.hpp"

namespace outlierscope::desk {

class TextGrammar {
 public:
  static constexpr uint64_t kLexiconSeed = 0x1e11c0du;

  explicit TextGrammar(uint64_t text_seed, int lexicon_size = 600) : rng_(text_seed) {
    SeededRng lex(kLexiconSeed);
    static const char* kOnsets[] = {"b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w",
                                    "br", "ch", "st", "th", "tr", "sh", "pl", "gr", "k", ""};
    static const char* kNuclei[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai", "y", "ie"};
    static const char* kCodas[] = {"", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ng", "rt", "ck"};
    while (static_cast<int>(words_.size()) < lexicon_size) {
      const int syllables = 1 + static_cast<int>(lex.below(3));
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += kOnsets[lex.below(std::size(kOnsets))];
        w += kNuclei[lex.below(std::size(kNuclei))];
        if (s + 1 == syllables || lex.below(3) == 0) w += kCodas[lex.below(std::size(kCodas))];
      }
      if (w.size() >= 2 && std::find(words_.begin(), words_.end(), w) == words_.end()) words_.push_back(w);
    }
    // Short function words head the Zipf ranking.
    static const char* kFunction[] = {"the", "of", "and", "in", "to", "a", "was", "is", "for", "on", "as", "with", "by", "he", "it"};
    words_.insert(words_.begin(), std::begin(kFunction), std::end(kFunction));
    double acc = 0.0;
    for (size_t r = 0; r < words_.size(); ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r) + 2.0, 1.05);
      cdf_.push_back(acc);
    }
    for (double& c : cdf_) c /= acc;
  }

  std::string word() {
    const double u = rng_.uniform();
    const auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
    return words_[static_cast<size_t>(std::min<std::ptrdiff_t>(it - cdf_.begin(), static_cast<std::ptrdiff_t>(words_.size()) - 1))];
  }

  std::string sentence() {
    const int n = 5 + static_cast<int>(rng_.below(12));
    std::string s;
    for (int i = 0; i < n; ++i) {
      std::string w = word();
      if (i == 0) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
      if (i > 0) s += ' ';
      s += w;
      if (i + 1 < n && i > 1 && rng_.below(9) == 0) s += " ,";
    }
    if (rng_.below(12) == 0) s += " @-@ " + std::to_string(1800 + rng_.below(220));
    return s + " .";
  }

  std::string paragraph() {
    const int n = 3 + static_cast<int>(rng_.below(6));
    std::string p = " ";
    for (int i = 0; i < n; ++i) p += (i ? " " : "") + sentence();
    return p + " \n";
  }

  std::string title() {
    std::string t = word();
    t[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
    if (rng_.below(2)) {
      std::string u = word();
      u[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(u[0])));
      t += " " + u;
    }
    return t;
  }

  /// One article in the raw WikiText layout: " = Title = " headings, blank
  /// lines as " \n", paragraphs starting with a space.
  std::string article() {
    std::string a = " = " + title() + " = \n \n";
    const int sections = 1 + static_cast<int>(rng_.below(3));
    for (int s = 0; s < sections; ++s) {
      if (s > 0) a += " = = " + title() + " = = \n \n";
      const int paras = 1 + static_cast<int>(rng_.below(3));
      for (int p = 0; p < paras; ++p) a += paragraph() + " \n";
    }
    return a;
  }

  /// Articles until at least `bytes` characters.
  std::string wikitext(size_t bytes) {
    std::string out = " \n";
    while (out.size() < bytes) out += article();
    return out;
  }

  /// JSON-lines documents in the C4 layout, at least `bytes` of text in total.
  std::string c4_jsonl(size_t bytes) {
    std::string out;
    size_t text = 0;
    while (text < bytes) {
      std::string doc;
      const int n = 2 + static_cast<int>(rng_.below(5));
      for (int i = 0; i < n; ++i) doc += (i ? " " : "") + sentence();
      text += doc.size();
      out += nlohmann::json{{"text", doc}, {"timestamp", "2019-04-25T12:00:00Z"}, {"url", "https://example.invalid/" + std::to_string(text)}}.dump() + "\n";
    }
    return out;
  }

 private:
  SeededRng rng_;
  std::vector<std::string> words_;
  std::vector<double> cdf_;
};

}  // namespace outlierscope::desk
