#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "attnlab/rng.hpp"

// Deterministic stand-in corpus: pseudo-English play text (speaker headings
// in capitals, dialogue lines, stanza breaks) over exactly the 65-character
// alphabet of the classic tiny corpus, so ln(vocab) and the character
// statistics seen by the model match what a run on the real file would see.

namespace testutil {

inline const std::string& corpus_alphabet() {
  static const std::string alphabet =
      "\n !$&',-.3:;?ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
  return alphabet;
}

namespace corpus_detail {

inline std::string make_word(attnlab::Rng& rng) {
  static const char* onsets[] = {"b",  "c",  "d",  "f",  "g",  "h",  "j",  "k",  "l",  "m",
                                 "n",  "p",  "qu", "r",  "s",  "t",  "v",  "w",  "x",  "z",
                                 "th", "sh", "ch", "st", "tr", "br", "gr", "pl", "fl", "wh"};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai", "ie", "oo"};
  static const char* codas[] = {"",  "n", "r",  "s",  "t",  "l",  "d",  "m",
                                "k", "w", "st", "nd", "th", "ck", "rn", "ng"};
  const int syllables = 1 + static_cast<int>(rng.below(3));
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += onsets[rng.below(std::size(onsets))];
    w += vowels[rng.below(std::size(vowels))];
    w += codas[rng.below(std::size(codas))];
  }
  return w;
}

struct Lexicon {
  std::vector<std::string> words;
  std::vector<double> cdf;
  std::vector<std::string> speakers;

  explicit Lexicon(attnlab::Rng& rng) {
    std::set<std::string> seen;
    while (words.size() < 1500) {
      std::string w = make_word(rng);
      if (w.size() > 10 || !seen.insert(w).second) continue;
      words.push_back(w);
    }
    // Zipf-ish weights over the fixed word ranks.
    cdf.resize(words.size());
    double total = 0;
    for (std::size_t i = 0; i < words.size(); ++i) {
      total += 1.0 / static_cast<double>(i + 3);
      cdf[i] = total;
    }
    for (auto& c : cdf) c /= total;
    // Speakers: one name forced per uppercase letter, then extras.
    for (char c = 'A'; c <= 'Z'; ++c) {
      std::string name = make_word(rng);
      for (auto& ch : name) ch = static_cast<char>(std::toupper(ch));
      name[0] = c;
      speakers.push_back(name);
    }
    for (int i = 0; i < 34; ++i) {
      std::string name = make_word(rng);
      for (auto& ch : name) ch = static_cast<char>(std::toupper(ch));
      speakers.push_back(name);
    }
  }

  const std::string& sample_word(attnlab::Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return words[static_cast<std::size_t>(it - cdf.begin())];
  }
};

inline void append_sentence(std::string& line, const Lexicon& lex, attnlab::Rng& rng) {
  const int n = 4 + static_cast<int>(rng.below(9));
  for (int i = 0; i < n; ++i) {
    std::string w = lex.sample_word(rng);
    if (i == 0) w[0] = static_cast<char>(std::toupper(w[0]));
    if (i > 0) line += rng.uniform() < 0.08 ? ", " : " ";
    line += w;
    if (rng.uniform() < 0.03) line += "'s";
    if (i > 0 && i + 1 < n && rng.uniform() < 0.02) line += ";";
    if (i + 1 < n && rng.uniform() < 0.015) {
      line += "-";
      line += lex.sample_word(rng);
    }
  }
  const double end = rng.uniform();
  line += end < 0.72 ? "." : (end < 0.87 ? "!" : "?");
}

}  // namespace corpus_detail

inline std::string synthetic_corpus(std::size_t target_bytes, std::uint64_t seed) {
  attnlab::Rng rng(seed);
  corpus_detail::Lexicon lex(rng);
  std::string out;
  out.reserve(target_bytes + 4096);
  std::size_t speeches = 0;
  while (out.size() < target_bytes) {
    out += lex.speakers[rng.below(lex.speakers.size())];
    out += ":\n";
    const int lines = 1 + static_cast<int>(rng.below(4));
    for (int i = 0; i < lines; ++i) {
      std::string line;
      while (line.size() < 38) {
        if (!line.empty()) line += " ";
        corpus_detail::append_sentence(line, lex, rng);
      }
      if (rng.uniform() < 0.05) line += " 'tis said";
      out += line;
      out += "\n";
    }
    out += "\n";
    // rare-character color: an occasional stage note with the corpus's
    // rare glyphs (3, $, &)
    if (++speeches % 97 == 0) out += "Enter HENRY 3, with $ marks & all.\n\n";
  }
  out.resize(target_bytes);
  // Guarantee the full 65-character alphabet survives truncation.
  std::set<char> present(out.begin(), out.end());
  std::string fill;
  for (char c : corpus_alphabet())
    if (!present.count(c)) fill += c;
  if (!fill.empty()) out += "\nHERALD:\nMark these: " + fill + " and so on.\n\n";
  return out;
}

}  // namespace testutil
