#include "memlab/mia.hpp"

#include <algorithm>
#include <cmath>

#include <zlib.h>

#include "memlab/autodiff.hpp"
#include "memlab/errors.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"
#include "memlab/stats.hpp"

namespace memlab::mia {

std::string to_string(Method m) {
  switch (m) {
    case Method::Loss: return "loss";
    case Method::Zlib: return "zlib";
    case Method::MinK: return "mink";
  }
  return "?";
}

std::vector<MiaInstance> build_instances(const corpus::PrivacySets& privacy, std::size_t per_record,
                                         std::uint64_t seed) {
  if (per_record < 1) throw ConfigError("mia.per_record must be >= 1");
  if (privacy.u1.size() != privacy.u2.size()) throw ConfigError("MIA needs |U1| == |U2| for balance");
  std::vector<MiaInstance> out;
  std::uint64_t next_id = 0;
  for (corpus::SetTag tag : {corpus::SetTag::U1, corpus::SetTag::U2}) {
    const auto& set = privacy.set(tag);
    for (std::size_t r = 0; r < set.size(); ++r) {
      for (std::size_t j = 0; j < per_record; ++j) {
        corpus::SyntheticSample s = corpus::make_scene_sample(derive_seed(seed, "mia-scene", next_id));
        s.id = next_id++;
        out.push_back(MiaInstance{corpus::render_watermark(std::move(s), set[r], corpus::WatermarkMode::Full, r),
                                  tag == corpus::SetTag::U1});
      }
    }
  }
  return out;
}

nlohmann::json instance_manifest(std::span<const MiaInstance> instances) {
  nlohmann::json j;
  j["schema_version"] = 1;
  auto& samples = j["samples"] = nlohmann::json::array();
  for (const auto& inst : instances) {
    const auto& w = *inst.sample.watermark;
    samples.push_back({{"id", inst.sample.id},
                       {"split", inst.member ? "member" : "nonmember"},
                       {"task_label", inst.sample.task_label},
                       {"watermark",
                        {{"set", corpus::to_string(w.record.set_tag)},
                         {"index", w.record_index},
                         {"mode", corpus::to_string(w.mode)}}}});
  }
  return j;
}

std::vector<double> token_logprobs(const ModelParams& params, const corpus::SyntheticSample& sample) {
  if (sample.answer.empty()) throw ContractError("token_logprobs: empty answer");
  const ForwardResult fr = forward(params, ModelInput{&sample.image, sample.question, sample.answer});
  std::vector<double> out(sample.answer.size());
  for (std::size_t j = 0; j < sample.answer.size(); ++j) {
    const std::vector<double> lp = log_softmax(fr.answer_logits.row_span(j));
    out[j] = lp.at(static_cast<std::size_t>(sample.answer[j]));
  }
  return out;
}

std::size_t compressed_length(std::string_view text) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw IoError("deflateInit2 failed");
  }
  std::vector<unsigned char> buf(deflateBound(&zs, static_cast<uLong>(text.size())) + 16);
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(text.data()));
  zs.avail_in = static_cast<uInt>(text.size());
  zs.next_out = buf.data();
  zs.avail_out = static_cast<uInt>(buf.size());
  const int rc = deflate(&zs, Z_FINISH);
  const std::size_t n = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw IoError("deflate did not finish");
  return n;
}

double mean_nll(std::span<const double> logprobs) {
  if (logprobs.empty()) throw ContractError("mean_nll: no tokens");
  return -stats::mean(logprobs);
}

double min_k_from_logprobs(std::span<const double> logprobs, double k_percent) {
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ContractError("min-k: k_percent must lie in (0, 100]");
  if (logprobs.empty()) throw ContractError("min-k: no tokens");
  std::vector<double> sorted(logprobs.begin(), logprobs.end());
  std::sort(sorted.begin(), sorted.end());
  const auto count = static_cast<std::size_t>(std::ceil(k_percent / 100.0 * static_cast<double>(sorted.size()) - 1e-9));
  const std::size_t n = std::clamp<std::size_t>(count, 1, sorted.size());
  return stats::mean(std::span<const double>(sorted.data(), n));
}

namespace {

double zlib_ratio(const ModelParams& params, const corpus::SyntheticSample& s) {
  const std::string text = corpus::serialize_sample_text(s);
  if (text.empty()) throw ContractError("zlib score: empty serialization");
  return mean_nll(token_logprobs(params, s)) / static_cast<double>(compressed_length(text));
}

}  // namespace

double loss_score(const ModelParams& params, const MiaInstance& instance) {
  return -mean_nll(token_logprobs(params, instance.sample));
}

double zlib_entropy_score(const ModelParams& params, const MiaInstance& instance) {
  return -zlib_ratio(params, instance.sample);
}

double min_k_prob(const ModelParams& params, const MiaInstance& instance, double k_percent) {
  return min_k_from_logprobs(token_logprobs(params, instance.sample), k_percent);
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc_roc: score/label count mismatch");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty()) throw ContractError("auc_roc: both classes are required");
  const std::vector<double> ranks = stats::average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i]) rank_sum += ranks[i];
  }
  const auto np = static_cast<double>(pos.size());
  const auto nn = static_cast<double>(neg.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double MiaReport::auc(Method m, std::string_view state) const {
  for (const auto& r : rows) {
    if (r.method == m && r.model_state == state) return r.auc;
  }
  throw ContractError("no AUC row for " + to_string(m) + "/" + std::string(state));
}

MiaReport run_mia_suite(const ModelParams& base, const ModelParams& finetuned,
                        std::span<const MiaInstance> instances, double k_percent) {
  if (instances.empty()) throw ContractError("run_mia_suite: no instances");
  std::size_t members = 0;
  for (const auto& inst : instances) members += inst.member ? 1 : 0;
  if (2 * members != instances.size()) throw ContractError("run_mia_suite: instances are not balanced");
  std::vector<int> labels;
  for (const auto& inst : instances) labels.push_back(inst.member ? 1 : 0);

  MiaReport rep;
  const std::pair<const ModelParams*, const char*> states[] = {{&base, "base"}, {&finetuned, "finetuned"}};
  std::vector<std::vector<double>> raw(2 * 3, std::vector<double>(instances.size()));
  for (std::size_t s = 0; s < 2; ++s) {
    const ModelParams& p = *states[s].first;
    parallel_for(instances.size(), [&](std::size_t i) {
      const auto& sample = instances[i].sample;
      const std::vector<double> lp = token_logprobs(p, sample);
      const double nll = mean_nll(lp);
      raw[s * 3 + 0][i] = nll;
      raw[s * 3 + 1][i] = nll / static_cast<double>(compressed_length(corpus::serialize_sample_text(sample)));
      raw[s * 3 + 2][i] = min_k_from_logprobs(lp, k_percent);
    });
  }
  for (std::size_t m = 0; m < 3; ++m) {
    for (std::size_t s = 0; s < 2; ++s) {
      const auto& r = raw[s * 3 + m];
      std::vector<double> score(r.size());
      for (std::size_t i = 0; i < r.size(); ++i) {
        score[i] = kAllMethods[m] == Method::MinK ? r[i] : -r[i];
        rep.scores.push_back(ScoreRecord{instances[i].sample.id, instances[i].member, kAllMethods[m],
                                         states[s].second, r[i], score[i]});
      }
      rep.rows.push_back(AucRow{kAllMethods[m], states[s].second, auc_roc(score, labels), members,
                                instances.size() - members});
    }
  }
  return rep;
}

}  // namespace memlab::mia
