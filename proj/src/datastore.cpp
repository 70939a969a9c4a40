#include "retro/datastore.hpp"

#include <cmath>
#include <fstream>

#include "retro/binary_io.hpp"
#include "retro/hashing.hpp"
#include "retro/tokenizer.hpp"

namespace retro {

void DatastoreConfig::validate() const {
  if (chunk_size < 2) throw ConfigError("datastore: chunk_size must be >= 2");
  if (embed_dim < 8) throw ConfigError("datastore: embed_dim must be >= 8");
  if (position_buckets < 1) throw ConfigError("datastore: position_buckets must be >= 1");
}

nlohmann::json DatastoreConfig::to_json() const {
  return {{"chunk_size", chunk_size},
          {"embed_dim", embed_dim},
          {"hash_seed", hash_seed},
          {"position_buckets", position_buckets}};
}

DatastoreConfig DatastoreConfig::from_json(const nlohmann::json& j) {
  DatastoreConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "chunk_size") c.chunk_size = value.get<int>();
    else if (key == "embed_dim") c.embed_dim = value.get<int>();
    else if (key == "hash_seed") c.hash_seed = value.get<std::uint64_t>();
    else if (key == "position_buckets") c.position_buckets = value.get<int>();
    else throw ConfigError("datastore: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

std::vector<ChunkRecord> chunk_document(std::span<const Token> tokens, int chunk_size, std::int64_t doc_id,
                                        std::int64_t first_chunk_id) {
  if (chunk_size < 2) throw ConfigError("chunk_document: chunk size must be >= 2");
  const auto m = static_cast<std::size_t>(chunk_size);
  const std::size_t count = (tokens.size() + m - 1) / m;
  std::vector<ChunkRecord> chunks(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& c = chunks[i];
    c.chunk_id = first_chunk_id + static_cast<std::int64_t>(i);
    c.doc_id = doc_id;
    c.offset = static_cast<std::int64_t>(i * m);
    c.tokens.assign(m, kPadId);
    const std::size_t end = std::min(tokens.size(), (i + 1) * m);
    std::copy(tokens.begin() + static_cast<std::ptrdiff_t>(i * m), tokens.begin() + static_cast<std::ptrdiff_t>(end),
              c.tokens.begin());
  }
  for (std::size_t i = 0; i < count; ++i) {
    chunks[i].continuation = i + 1 < count ? chunks[i + 1].tokens : std::vector<Token>(m, kPadId);
  }
  return chunks;
}

Embedding embed_chunk(std::span<const Token> tokens, const DatastoreConfig& config) {
  const auto d = config.embed_dim;
  const auto m = tokens.size();
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
  auto bucket = [&](std::size_t pos) {
    return static_cast<std::uint64_t>(pos * static_cast<std::size_t>(config.position_buckets) / std::max<std::size_t>(m, 1));
  };
  auto add = [&](std::uint64_t h) {
    const auto slot = static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(d));
    acc(slot) += (h >> 63) ? -1.0 : 1.0;
  };
  for (std::size_t i = 0; i < m; ++i) {
    if (tokens[i] == kPadId) continue;
    add(hash_combine(config.hash_seed, 1, tokens[i], bucket(i)));
    if (i + 1 < m && tokens[i + 1] != kPadId) {
      add(hash_combine(config.hash_seed, 2, tokens[i], tokens[i + 1], bucket(i)));
    }
  }
  const double norm = acc.norm();
  Embedding out = Embedding::Zero(d);
  if (norm == 0.0) {
    out(0) = 1.0f;
    return out;
  }
  out = (acc / norm).cast<float>();
  return out;
}

std::vector<CorpusDocument> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::vector<CorpusDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      docs.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError("read failed: " + path.string());
  return docs;
}

DatastoreBuildResult build_datastore(const std::filesystem::path& corpus_path, const DatastoreConfig& config,
                                     const std::filesystem::path& out_dir, const nlohmann::json& echo) {
  return build_datastore(read_corpus_jsonl(corpus_path), config, out_dir, echo);
}

DatastoreBuildResult build_datastore(const std::vector<CorpusDocument>& docs, const DatastoreConfig& config,
                                     const std::filesystem::path& out_dir, const nlohmann::json& echo) {
  config.validate();
  std::filesystem::create_directories(out_dir);
  const ByteTokenizer tok;
  const auto m = static_cast<std::uint32_t>(config.chunk_size);

  std::vector<DocumentSpan> spans;
  std::vector<ChunkRecord> all;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const auto ids = tok.encode(docs[d].text);
    auto chunks = chunk_document(ids, config.chunk_size, static_cast<std::int64_t>(d),
                                 static_cast<std::int64_t>(all.size()));
    spans.push_back({docs[d].id, static_cast<std::int64_t>(all.size()), static_cast<std::int64_t>(chunks.size()),
                     static_cast<std::int64_t>(ids.size())});
    for (auto& c : chunks) all.push_back(std::move(c));
  }
  const auto n = static_cast<std::uint64_t>(all.size());

  BinaryWriter chunks;
  chunks.magic("RTCK");
  chunks.put(kChunksVersion);
  chunks.put(m);
  chunks.put(n);
  for (const auto& c : all) {
    chunks.put_span<Token>(c.tokens);
    chunks.put_span<Token>(c.continuation);
  }
  chunks.write_file(out_dir / "chunks.bin");

  BinaryWriter embeds;
  embeds.magic("RTEM");
  embeds.put(kEmbedsVersion);
  embeds.put(static_cast<std::uint32_t>(config.embed_dim));
  embeds.put(n);
  for (const auto& c : all) {
    const Embedding e = embed_chunk(c.tokens, config);
    embeds.put_span<float>(std::span<const float>(e.data(), static_cast<std::size_t>(e.size())));
  }
  embeds.write_file(out_dir / "embeds.bin");

  nlohmann::json manifest;
  manifest["format"] = "retro-datastore";
  manifest["tool_version"] = kToolVersion;
  manifest["config"] = config.to_json();
  manifest["echo"] = echo;
  manifest["num_chunks"] = n;
  auto& jd = manifest["documents"] = nlohmann::json::array();
  for (const auto& s : spans) {
    jd.push_back({{"id", s.id}, {"first_chunk", s.first_chunk}, {"num_chunks", s.num_chunks}, {"num_tokens", s.num_tokens}});
  }
  manifest["checksums"] = {{"chunks.bin", crc32_hex(chunks.bytes())}, {"embeds.bin", crc32_hex(embeds.bytes())}};
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return {static_cast<std::int64_t>(n), out_dir};
}

Datastore Datastore::open(const std::filesystem::path& dir) {
  Datastore ds;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  }
  ds.config_ = DatastoreConfig::from_json(manifest.at("config"));
  for (const auto& d : manifest.at("documents")) {
    ds.documents_.push_back({d.at("id").get<std::string>(), d.at("first_chunk").get<std::int64_t>(),
                             d.at("num_chunks").get<std::int64_t>(), d.at("num_tokens").get<std::int64_t>()});
  }

  auto chunks = BinaryReader::from_file(dir / "chunks.bin");
  chunks.expect_magic("RTCK");
  if (chunks.get<std::uint32_t>() != kChunksVersion) throw ParseError("chunks.bin: unsupported version");
  const auto m = chunks.get<std::uint32_t>();
  const auto n = chunks.get<std::uint64_t>();
  if (static_cast<int>(m) != ds.config_.chunk_size) throw IntegrityError("chunks.bin: chunk size disagrees with manifest");
  ds.num_chunks_ = static_cast<std::int64_t>(n);
  ds.records_.resize(n * 2 * m);
  chunks.get_span<Token>(ds.records_);

  auto embeds = BinaryReader::from_file(dir / "embeds.bin");
  embeds.expect_magic("RTEM");
  if (embeds.get<std::uint32_t>() != kEmbedsVersion) throw ParseError("embeds.bin: unsupported version");
  const auto d = embeds.get<std::uint32_t>();
  if (embeds.get<std::uint64_t>() != n) throw IntegrityError("embeds.bin: record count disagrees with chunks.bin");
  ds.embeddings_.resize(static_cast<Eigen::Index>(n), d);
  embeds.get_span<float>(std::span<float>(ds.embeddings_.data(), static_cast<std::size_t>(ds.embeddings_.size())));
  return ds;
}

std::vector<Token> Datastore::fetch_neighbor_tokens(std::int64_t chunk_id) const {
  if (chunk_id < 0 || chunk_id >= num_chunks_) {
    throw LookupError("datastore: chunk id " + std::to_string(chunk_id) + " out of range");
  }
  const auto w = static_cast<std::size_t>(2 * config_.chunk_size);
  const auto begin = records_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(chunk_id) * w);
  return {begin, begin + static_cast<std::ptrdiff_t>(w)};
}

ChunkRecord Datastore::record(std::int64_t chunk_id) const {
  auto both = fetch_neighbor_tokens(chunk_id);
  const auto m = static_cast<std::ptrdiff_t>(config_.chunk_size);
  ChunkRecord r;
  r.chunk_id = chunk_id;
  auto it = std::upper_bound(documents_.begin(), documents_.end(), chunk_id,
                             [](std::int64_t id, const DocumentSpan& s) { return id < s.first_chunk; });
  if (it != documents_.begin()) {
    --it;
    r.doc_id = it - documents_.begin();
    r.offset = (chunk_id - it->first_chunk) * m;
  }
  r.tokens.assign(both.begin(), both.begin() + m);
  r.continuation.assign(both.begin() + m, both.end());
  return r;
}

}  // namespace retro
