#pragma once

#include "repflow/activations.hpp"
#include "repflow/cca.hpp"
#include "repflow/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace repflow {

/// Per-token labels keyed by (sentence index, token index within the sentence).
class Annotations {
public:
    /// TSV lines "sentence_index<TAB>token_index<TAB>label"; blank lines and lines starting with '#' are skipped.
    static Annotations load(const std::filesystem::path& path);

    void set(std::uint32_t sentence, std::uint32_t token, std::string label);
    const std::string* find(std::uint32_t sentence, std::uint32_t token) const;
    std::size_t size() const noexcept { return labels_.size(); }

private:
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::string> labels_;
};

struct GroupSpec {
    enum class Kind { All, FrequencyBucket, TokenSet, Annotation };
    Kind kind = Kind::All;
    /// Frequency-rank bucket [rank_lo, rank_hi); rank_hi == 0 means unbounded.
    std::size_t rank_lo = 1;
    std::size_t rank_hi = 0;
    std::set<TokenId> tokens;
    std::string label;
    const Annotations* annotations = nullptr;

    static GroupSpec all() { return {}; }
    static GroupSpec frequency(std::size_t lo, std::size_t hi);
    static GroupSpec token_set(std::set<TokenId> tokens);
    static GroupSpec annotation(const Annotations& ann, std::string label);

    /// Does a source token (by id, sentence, token index) belong to the group?
    bool matches(TokenId token, std::uint32_t sentence, std::uint32_t token_index) const;
    std::string describe() const;
};

/// Rank buckets [1,100), [100,1000), [1000,5000), [5000, inf).
std::vector<GroupSpec> default_frequency_buckets();

/// Non-frame rows of `acts` whose input token is in the group.
std::vector<std::size_t> select_rows(const LayerActivations& acts, const GroupSpec& group);

struct ProfilePoint {
    std::size_t layer = 0;
    double score = 0.0;
    double score_ab = 0.0;
    double score_ba = 0.0;
    std::size_t n = 0;
};

struct Profile {
    std::string kind;
    std::string group;
    std::string model_a;
    std::string model_b;
    std::vector<ProfilePoint> points;
};

/// score[l] = PWCCA distance between layers l and l+1 on the group's rows.
Profile layer_change_profile(const LayerActivations& acts, const GroupSpec& group);

/// score[l] = PWCCA distance between A and B at layer l on aligned occurrences
/// (matched by sentence and source token index) belonging to the group.
Profile model_distance_profile(const LayerActivations& a, const LayerActivations& b, const GroupSpec& group,
                               std::size_t max_rows = 0, std::uint64_t seed = 0);

struct InfluenceOptions {
    std::size_t max_sentences = 500;
    /// Compare at the top layer instead of the ablated layer.
    bool at_top_layer = false;
    std::uint64_t seed = 0;
    std::size_t batch_sentences = 64;
};

/// Per ablated layer l: PWCCA distance between the other tokens' representations
/// with and without attention to one group token i (AblationSpec{l, i}).
Profile token_influence_profile(const Model& model, std::span<const Encoded> sentences, const GroupSpec& group,
                                const InfluenceOptions& options = {});

/// Stacked (normal, ablated) views used by token_influence_profile at one layer.
std::pair<Matrix, Matrix> influence_views(const Model& model, std::span<const Encoded> sentences,
                                          std::span<const std::pair<std::size_t, std::size_t>> picks, std::size_t layer,
                                          const InfluenceOptions& options);

nlohmann::json to_json(const Profile& p, const std::string& direction = "avg");

}  // namespace repflow
