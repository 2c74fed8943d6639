#pragma once

// Corpus plumbing for the parser: sentence derivation, parallel-corpus
// loading, and a deterministic synthetic corpus generator for overfit runs.

#include <chaform/amr_graph.hpp>
#include <chaform/target_form.hpp>

#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace chaform {

// Concept mentions in first-visit DFS order, duplicates included — the same
// order the linearizer walks, so the source text mirrors the tree reading.
inline std::vector<std::string> dfs_concept_sentence(const AmrGraph& g) {
  ReplicatedTree rep = replicate_referents(g);
  std::vector<std::string> words;
  words.reserve(rep.tree.nodes.size());
  for (std::size_t i = 0; i < rep.tree.nodes.size(); ++i)
    words.push_back(rep.tree.nodes.at("n" + std::to_string(i)));
  return words;
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

struct ParallelExample {
  std::vector<std::string> source;
  TargetForm form;
  AmrGraph graph;
};

// Reads a corpus whose records carry `# ::snt` sentences; linearizes each
// graph into the requested form kind.
inline std::vector<ParallelExample> load_parallel_corpus(std::istream& in, FormKind kind) {
  std::vector<ParallelExample> out;
  std::vector<CorpusRecord> records = read_corpus(in);
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto it = records[i].meta.find("snt");
    if (it == records[i].meta.end())
      throw ValidationError("corpus record " + std::to_string(i + 1) +
                            " is missing ::snt metadata");
    ParallelExample ex;
    ex.source = split_words(it->second);
    ex.graph = record_graph(records[i]);
    ex.form = linearize(ex.graph, kind);
    out.push_back(std::move(ex));
  }
  return out;
}

// Deterministic synthetic corpus: seeded random graphs with distinct
// sentences (the concept reading of each tree).
inline std::vector<CorpusRecord> make_synthetic_corpus(int count, std::uint64_t seed,
                                                       int max_nodes, int max_reentrancies) {
  std::vector<CorpusRecord> out;
  std::set<std::string> seen;
  std::uint64_t sub = seed;
  int guard = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++guard > count * 1000)
      throw ValidationError("synthetic corpus: could not find enough distinct sentences");
    AmrGraph g = random_graph(sub++, max_nodes, max_reentrancies);
    std::string snt = join_words(dfs_concept_sentence(g));
    if (!seen.insert(snt).second) continue;
    CorpusRecord rec;
    rec.meta["id"] = "synthetic-" + std::to_string(out.size() + 1);
    rec.meta["snt"] = snt;
    rec.penman = serialize_penman(g);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace chaform
