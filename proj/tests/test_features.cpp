#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "miditune/features.hpp"
#include "test_util.hpp"

using namespace miditune;

namespace {

Score score_44(std::vector<Note> notes) {
    Score s;
    s.ticks_per_quarter = 480;
    s.tempos.push_back({0, 120.0});
    s.time_signatures.push_back({0, 4, 4});
    s.notes = std::move(notes);
    s.normalize();
    return s;
}

}  // namespace

TEST_CASE("four sequential quarter notes") {
    const Score s = score_44({{60, 64, 0, 480}, {64, 64, 480, 480}, {67, 64, 960, 480},
                              {72, 64, 1440, 480}});
    const FeatureReport f = extract_features(s);
    CHECK(f.n_notes == 4);
    CHECK(f.polyphony_rate == 0.0);
    CHECK(f.empty_beat_rate == 0.0);
    CHECK(f.pitch_range == 12);
    CHECK(f.velocity_range == 0);
    CHECK(f.pitch_histogram[60] == 1);
    CHECK(f.pitch_histogram[72] == 1);
}

TEST_CASE("a held triad is fully polyphonic") {
    const Score s = score_44({{60, 80, 0, 1920}, {64, 80, 0, 1920}, {67, 80, 0, 1920}});
    const FeatureReport f = extract_features(s);
    CHECK(f.polyphony_rate == 1.0);
    CHECK(f.scale_consistency == 1.0);  // C major triad
}

TEST_CASE("empty score defaults") {
    Score s;
    s.normalize();
    const FeatureReport f = extract_features(s);
    CHECK(f.n_notes == 0);
    CHECK(f.polyphony_rate == 0.0);
    CHECK(f.empty_beat_rate == 0.0);
    CHECK(f.pitch_range == 0);
    CHECK(f.velocity_range == 0);
    CHECK(f.scale_consistency == 1.0);
}

TEST_CASE("histogram mass equals the note count") {
    Rng rng(0x88);
    for (int i = 0; i < 10; ++i) {
        const Score s = testutil::random_score(rng);
        const FeatureReport f = extract_features(s);
        int64_t pitch_mass = 0, vel_mass = 0;
        for (const auto c : f.pitch_histogram) pitch_mass += c;
        for (const auto c : f.velocity_histogram) vel_mass += c;
        CHECK(pitch_mass == f.n_notes);
        CHECK(vel_mass == f.n_notes);
    }
}

TEST_CASE("every feature matches the 1-tick brute-force oracle exactly") {
    Rng rng(0xFACE);
    for (int i = 0; i < 50; ++i) {
        testutil::RandomScoreOpts opts;
        opts.max_bars = 6;
        opts.max_notes = 50;
        const Score s = testutil::random_score(rng, opts);
        const FeatureReport got = extract_features(s);
        const testutil::FeatureOracle want = testutil::brute_force_features(s);
        CHECK(got.n_notes == want.n_notes);
        CHECK(got.polyphony_rate == want.polyphony_rate);
        CHECK(got.empty_beat_rate == want.empty_beat_rate);
        CHECK(got.pitch_histogram == want.pitch_histogram);
        CHECK(got.pitch_range == want.pitch_range);
        CHECK(got.scale_consistency == want.scale_consistency);
        CHECK(got.velocity_histogram == want.velocity_histogram);
        CHECK(got.velocity_range == want.velocity_range);
    }
}

TEST_CASE("scale consistency of diatonic, chromatic, and single-note sets") {
    // all seven white keys
    std::vector<Note> white;
    int64_t t = 0;
    for (const int p : {60, 62, 64, 65, 67, 69, 71}) white.push_back({p, 64, t += 480, 240});
    CHECK(scale_consistency(score_44(std::move(white))) == 1.0);

    // one note of each pitch class
    std::vector<Note> chroma;
    t = 0;
    for (int pc = 0; pc < 12; ++pc) chroma.push_back({60 + pc, 64, t += 480, 240});
    CHECK(scale_consistency(score_44(std::move(chroma))) == doctest::Approx(7.0 / 12.0));

    CHECK(scale_consistency(score_44({{61, 64, 0, 480}})) == 1.0);
}

TEST_CASE("transposition shifts the pitch histogram and preserves the rest") {
    Rng rng(0x505);
    testutil::RandomScoreOpts opts;
    opts.tokenizer_safe = true;  // pitches 21..108 leave headroom
    opts.max_notes = 30;
    const Score s = testutil::random_score(rng, opts);
    Score up = s;
    for (auto& n : up.notes) n.pitch += 7;
    up.normalize();
    const FeatureReport a = extract_features(s);
    const FeatureReport b = extract_features(up);
    CHECK(a.pitch_range == b.pitch_range);
    CHECK(a.polyphony_rate == b.polyphony_rate);
    CHECK(a.empty_beat_rate == b.empty_beat_rate);
    CHECK(a.scale_consistency == b.scale_consistency);
    for (int p = 0; p < 121; ++p) CHECK(a.pitch_histogram[static_cast<size_t>(p)] ==
                                        b.pitch_histogram[static_cast<size_t>(p) + 7]);
}

TEST_CASE("average piano roll of one score is its binarized roll") {
    Rng rng(0x11);
    const Score s = testutil::random_score(rng);
    const std::vector<Score> one = {s};
    const PianoRollSummary roll = average_piano_roll(one, 16, 4);
    CHECK(roll.cols == 64);
    CHECK(roll.sample_count == 1);
    const auto bin = binarize_roll(s, 16, 4);
    for (size_t i = 0; i < bin.size(); ++i) CHECK(roll.cells[i] == static_cast<double>(bin[i]));

    const std::vector<Score> twice = {s, s};
    const PianoRollSummary dup = average_piano_roll(twice, 16, 4);
    CHECK(dup.cells == roll.cells);
}

TEST_CASE("two disjoint single-note scores average to 0.5 cells") {
    const Score a = score_44({{60, 64, 0, 480}});
    const Score b = score_44({{64, 64, 960, 480}});
    const std::vector<Score> both = {a, b};
    const PianoRollSummary roll = average_piano_roll(both, 16, 4);
    int halves = 0, others = 0;
    for (const double c : roll.cells) {
        if (c == 0.5)
            ++halves;
        else if (c != 0.0)
            ++others;
    }
    CHECK(halves == 8);  // two quarter notes, 4 cells each
    CHECK(others == 0);
}

TEST_CASE("diversity extremes: identical lists and exact complements") {
    Rng rng(0x3C);
    const Score s = testutil::random_score(rng);
    const std::vector<Score> same = {s, s, s};
    CHECK(diversity(same, 16, 4) == 0.0);

    // one roll fully on, the other fully off
    Score full;
    full.ticks_per_quarter = 480;
    full.tempos.push_back({0, 120.0});
    full.time_signatures.push_back({0, 4, 4});
    for (int p = 0; p < 128; ++p) full.notes.push_back({p, 100, 0, 16 * 480});
    full.normalize();
    Score silent;
    silent.normalize();
    const std::vector<Score> pair = {full, silent};
    CHECK(diversity(pair, 16, 4) == 1.0);

    const std::vector<Score> lone = {s};
    CHECK_THROWS_AS(diversity(lone, 16, 4), std::invalid_argument);
    CHECK_THROWS_AS(average_piano_roll(std::vector<Score>{}, 16, 4), std::invalid_argument);
}

TEST_CASE("diversity equals an independent O(n^2) pair loop") {
    Rng rng(0xD1F);
    std::vector<Score> scores;
    for (int i = 0; i < 10; ++i) scores.push_back(testutil::random_score(rng));
    const double got = diversity(scores, 16, 4);

    std::vector<std::vector<uint8_t>> rolls;
    for (const auto& s : scores) rolls.push_back(binarize_roll(s, 16, 4));
    double total = 0;
    int pairs = 0;
    for (size_t i = 0; i < rolls.size(); ++i)
        for (size_t j = i + 1; j < rolls.size(); ++j) {
            int64_t diff = 0;
            for (size_t k = 0; k < rolls[i].size(); ++k) diff += rolls[i][k] ^ rolls[j][k];
            total += static_cast<double>(diff) / static_cast<double>(rolls[i].size());
            ++pairs;
        }
    CHECK(got == doctest::Approx(total / pairs).epsilon(1e-12));

    // permutation invariance
    std::vector<Score> shuffled = scores;
    std::swap(shuffled[0], shuffled[7]);
    std::swap(shuffled[2], shuffled[9]);
    CHECK(diversity(shuffled, 16, 4) == got);
}
