#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "genimg/errors.hpp"
#include "genimg/inferers.hpp"

using namespace genimg;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), sizeof(double) * size_t(a.numel())) == 0;
}

void zero_params(NetworkHandle& net) {
    for (const std::string& name : net.params().names()) {
        Tensor& v = net.params().at(name).node()->value;
        for (int64_t i = 0; i < v.numel(); ++i) v[i] = 0.0;
    }
}

UNetConfig guided_unet_cfg() {
    UNetConfig c;
    c.in_channels = 1;
    c.out_channels = 1;
    c.channels = {8, 16};
    c.attention_levels = {false, true};
    c.head_channels = {0, 8};
    c.cross_attention_dim = 6;
    c.num_res_blocks = 1;
    c.norm_groups = 4;
    return c;
}

UNetConfig plain_unet_cfg(int64_t in = 1, int64_t out = 1) {
    UNetConfig c;
    c.in_channels = in;
    c.out_channels = out;
    c.channels = {8, 16};
    c.attention_levels = {false, false};
    c.head_channels = {0, 0};
    c.cross_attention_dim = 0;
    c.num_res_blocks = 1;
    c.norm_groups = 4;
    return c;
}

// Hand-written DDIM eta=0 loop with a pinned context pointer; the production
// sampler must agree bitwise when guidance collapses to one pass per step.
Tensor manual_ddim(const DiffusionUNet& net, const NoiseSchedule& s,
                   const std::vector<int64_t>& shape, RandomSource src, int n,
                   const Tensor* ctx) {
    Rng rng(src);
    Tensor x = draw_gaussian(shape, rng);
    const std::vector<int> seq = timestep_subsequence(s.T, n);
    for (size_t i = 0; i < seq.size(); ++i) {
        const int t = seq[i];
        const int t_prev = i + 1 < seq.size() ? seq[i + 1] : 0;
        Tensor out = unet_forward(net, x, {t}, ctx);
        x = ddim_step(out, t, t_prev, x, s, 0.0, rng);
    }
    return x;
}

Tensor pick_rows(const Tensor& batch, const std::vector<int64_t>& rows) {
    std::vector<int64_t> shape = batch.shape();
    shape[0] = int64_t(rows.size());
    Tensor out(shape);
    const int64_t item = batch.numel() / batch.dim(0);
    for (size_t r = 0; r < rows.size(); ++r) {
        std::memcpy(out.data() + int64_t(r) * item, batch.data() + rows[r] * item,
                    sizeof(double) * size_t(item));
    }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("inferers");

TEST_CASE("sampler kinds round-trip through their names") {
    for (SamplerKind k : {SamplerKind::ddpm, SamplerKind::ddim, SamplerKind::pndm}) {
        CHECK(sampler_from_string(to_string(k)) == k);
    }
    CHECK_THROWS_AS(sampler_from_string("euler"), RangeError);
}

TEST_CASE("guidance weight one runs exactly the conditional model") {
    DiffusionUNet net(guided_unet_cfg(), RandomSource{301, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 12, 1e-3, 2e-2);
    Rng ctx_rng(RandomSource{302, 0});
    Tensor ctx = draw_gaussian({2, 3, 6}, ctx_rng);

    SampleOptions opts;
    opts.sampler = SamplerKind::ddim;
    opts.n_steps = 4;
    opts.context = ctx;
    opts.guidance.weight = 1.0;

    const RandomSource src{303, 0};
    Rng rng(src);
    Tensor got = sample_images(net, s, {2, 1, 8, 8}, rng, opts);
    Tensor want = manual_ddim(net, s, {2, 1, 8, 8}, src, 4, &ctx);
    CHECK(bitwise_equal(got, want));
}

TEST_CASE("guidance weight zero runs exactly the unconditioned model") {
    DiffusionUNet net(guided_unet_cfg(), RandomSource{311, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 12, 1e-3, 2e-2);
    Rng ctx_rng(RandomSource{312, 0});
    Tensor ctx = draw_gaussian({2, 3, 6}, ctx_rng);

    SampleOptions opts;
    opts.sampler = SamplerKind::ddim;
    opts.n_steps = 4;
    opts.context = ctx;
    opts.guidance.weight = 0.0;

    SUBCASE("an undefined null context stands for the zero embedding") {
        const RandomSource src{313, 0};
        Rng rng(src);
        Tensor got = sample_images(net, s, {2, 1, 8, 8}, rng, opts);
        Tensor zeros(ctx.shape());
        Tensor want = manual_ddim(net, s, {2, 1, 8, 8}, src, 4, &zeros);
        CHECK(bitwise_equal(got, want));
    }
    SUBCASE("an explicit null context is the one evaluated") {
        Rng null_rng(RandomSource{314, 0});
        Tensor null_ctx = draw_gaussian({2, 3, 6}, null_rng);
        opts.guidance.null_context = null_ctx;
        const RandomSource src{315, 0};
        Rng rng(src);
        Tensor got = sample_images(net, s, {2, 1, 8, 8}, rng, opts);
        Tensor want = manual_ddim(net, s, {2, 1, 8, 8}, src, 4, &null_ctx);
        CHECK(bitwise_equal(got, want));
    }
}

TEST_CASE("when the null context equals the live one the weight is irrelevant") {
    DiffusionUNet net(guided_unet_cfg(), RandomSource{321, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 10, 1e-3, 2e-2);
    Rng ctx_rng(RandomSource{322, 0});
    Tensor ctx = draw_gaussian({1, 2, 6}, ctx_rng);

    SampleOptions opts;
    opts.sampler = SamplerKind::ddim;
    opts.n_steps = 3;
    opts.context = ctx;
    opts.guidance.null_context = ctx;

    const RandomSource src{323, 0};
    std::vector<Tensor> outs;
    for (double w : {0.0, 0.3, 1.0, 7.0}) {
        opts.guidance.weight = w;
        Rng rng(src);
        outs.push_back(sample_images(net, s, {1, 1, 8, 8}, rng, opts));
    }
    for (size_t i = 1; i < outs.size(); ++i) CHECK(bitwise_equal(outs[0], outs[i]));
}

TEST_CASE("evaluation counts follow the guidance weight") {
    DiffusionUNet net(guided_unet_cfg(), RandomSource{331, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 8, 1e-3, 2e-2);
    Rng ctx_rng(RandomSource{332, 0});
    Tensor ctx = draw_gaussian({1, 2, 6}, ctx_rng);

    auto count_for = [&](SamplerKind kind, int n, const Tensor* context, double w) {
        SampleOptions opts;
        opts.sampler = kind;
        opts.n_steps = n;
        if (context) opts.context = *context;
        opts.guidance.weight = w;
        Rng rng(RandomSource{333, 0});
        int64_t evals = -1;
        sample_images(net, s, {1, 1, 8, 8}, rng, opts, &evals);
        return evals;
    };

    CHECK(count_for(SamplerKind::ddim, 5, nullptr, 1.0) == 5);
    CHECK(count_for(SamplerKind::ddim, 5, &ctx, 0.0) == 5);
    CHECK(count_for(SamplerKind::ddim, 5, &ctx, 1.0) == 5);
    CHECK(count_for(SamplerKind::ddim, 5, &ctx, 0.5) == 10);
    CHECK(count_for(SamplerKind::ddpm, 8, &ctx, 2.0) == 16);
    const int64_t pndm_single = count_for(SamplerKind::pndm, 4, &ctx, 1.0);
    CHECK(pndm_single > 0);
    CHECK(count_for(SamplerKind::pndm, 4, &ctx, 0.5) == 2 * pndm_single);
}

TEST_CASE("the ddpm sampler insists on the full schedule") {
    DiffusionUNet net(plain_unet_cfg(), RandomSource{341, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 6, 1e-3, 2e-2);
    SampleOptions opts;
    opts.sampler = SamplerKind::ddpm;
    opts.n_steps = 3;
    Rng rng(RandomSource{342, 0});
    CHECK_THROWS_AS(sample_images(net, s, {1, 1, 8, 8}, rng, opts), ConfigError);
    opts.n_steps = 6;
    CHECK_NOTHROW(sample_images(net, s, {1, 1, 8, 8}, rng, opts));
}

TEST_CASE("sampling is a deterministic function of the random source") {
    DiffusionUNet net(plain_unet_cfg(), RandomSource{351, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::cosine, 10, 1e-3, 2e-2);
    SampleOptions opts;
    opts.sampler = SamplerKind::pndm;
    opts.n_steps = 5;
    Rng a(RandomSource{352, 9});
    Rng b(RandomSource{352, 9});
    CHECK(bitwise_equal(sample_images(net, s, {1, 1, 8, 8}, a, opts),
                        sample_images(net, s, {1, 1, 8, 8}, b, opts)));
}

TEST_CASE("guidance configuration is validated") {
    DiffusionUNet net(guided_unet_cfg(), RandomSource{361, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 6, 1e-3, 2e-2);
    Rng ctx_rng(RandomSource{362, 0});
    Tensor ctx = draw_gaussian({2, 2, 6}, ctx_rng);

    SampleOptions opts;
    opts.sampler = SamplerKind::ddim;
    opts.n_steps = 3;
    opts.context = ctx;

    Rng rng(RandomSource{363, 0});
    opts.guidance.weight = -0.1;
    CHECK_THROWS_AS(sample_images(net, s, {2, 1, 8, 8}, rng, opts), RangeError);
    opts.guidance.weight = std::nan("");
    CHECK_THROWS_AS(sample_images(net, s, {2, 1, 8, 8}, rng, opts), NonFiniteValue);
    opts.guidance.weight = 1.5;
    opts.guidance.null_context = Tensor({2, 5, 6});
    CHECK_THROWS_AS(sample_images(net, s, {2, 1, 8, 8}, rng, opts), ShapeMismatch);
}

TEST_CASE("a batch-one null context broadcasts across the batch") {
    DiffusionUNet net(guided_unet_cfg(), RandomSource{371, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 8, 1e-3, 2e-2);
    Rng ctx_rng(RandomSource{372, 0});
    Tensor ctx = draw_gaussian({3, 2, 6}, ctx_rng);
    Tensor null_row = draw_gaussian({1, 2, 6}, ctx_rng);
    Tensor null_full({3, 2, 6});
    for (int64_t b = 0; b < 3; ++b) {
        std::memcpy(null_full.data() + b * null_row.numel(), null_row.data(),
                    sizeof(double) * size_t(null_row.numel()));
    }

    SampleOptions opts;
    opts.sampler = SamplerKind::ddim;
    opts.n_steps = 3;
    opts.context = ctx;
    opts.guidance.weight = 2.0;

    opts.guidance.null_context = null_row;
    Rng a(RandomSource{373, 0});
    Tensor broadcast = sample_images(net, s, {3, 1, 8, 8}, a, opts);

    opts.guidance.null_context = null_full;
    Rng b(RandomSource{373, 0});
    Tensor tiled = sample_images(net, s, {3, 1, 8, 8}, b, opts);
    CHECK(bitwise_equal(broadcast, tiled));
}

TEST_CASE("latent sampling decodes the scaled latent draw") {
    DiffusionUNet unet(plain_unet_cfg(4, 4), RandomSource{381, 0});
    AutoencoderKLConfig acfg;
    acfg.channels = {8, 16};
    acfg.latent_channels = 4;
    acfg.norm_groups = 4;
    AutoencoderKL ae(acfg, RandomSource{382, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 8, 1e-3, 2e-2);

    SampleOptions opts;
    opts.sampler = SamplerKind::ddim;
    opts.n_steps = 3;

    const std::vector<int64_t> latent_shape = {2, 4, 4, 4};

    SUBCASE("scale factor one is plain decode-after-sample") {
        Rng a(RandomSource{383, 0});
        Tensor via_latent = latent_sample(unet, ae, s, latent_shape, 1.0, a, opts);
        Rng b(RandomSource{383, 0});
        Tensor direct = kl_decode(ae, sample_images(unet, s, latent_shape, b, opts));
        CHECK(bitwise_equal(via_latent, direct));
        CHECK(via_latent.shape() ==
              std::vector<int64_t>{2, 1, 4 * acfg.compression_factor(),
                                   4 * acfg.compression_factor()});
    }
    SUBCASE("other scale factors divide the latent before decoding") {
        Rng a(RandomSource{384, 0});
        Tensor via_latent = latent_sample(unet, ae, s, latent_shape, 2.0, a, opts);
        Rng b(RandomSource{384, 0});
        Tensor direct = kl_decode(ae, scale(sample_images(unet, s, latent_shape, b, opts), 0.5));
        CHECK(bitwise_equal(via_latent, direct));
    }
    SUBCASE("validation") {
        Rng rng(RandomSource{385, 0});
        CHECK_THROWS_AS(latent_sample(unet, ae, s, latent_shape, 0.0, rng, opts), RangeError);
        CHECK_THROWS_AS(latent_sample(unet, ae, s, {2, 3, 4, 4}, 1.0, rng, opts), ShapeMismatch);
    }
}

TEST_CASE("the scale factor satisfies its defining identity") {
    AutoencoderKLConfig acfg;
    acfg.channels = {8, 16};
    acfg.latent_channels = 4;
    acfg.norm_groups = 4;
    AutoencoderKL ae(acfg, RandomSource{391, 0});

    Rng rng(RandomSource{392, 0});
    Tensor calibration = draw_gaussian({3, 1, 8, 8}, rng);
    const double sf = compute_scale_factor(ae, calibration);

    const Tensor mu = kl_encode(ae, calibration).mu;
    double mean = 0.0;
    for (int64_t i = 0; i < mu.numel(); ++i) mean += mu[i];
    mean /= double(mu.numel());
    double var = 0.0;
    for (int64_t i = 0; i < mu.numel(); ++i) var += (mu[i] - mean) * (mu[i] - mean);
    var /= double(mu.numel());
    CHECK(sf * std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-12));

    // Latents rescaled by the factor have unit spread by construction.
    Tensor scaled = scale(mu, sf);
    double smean = 0.0;
    for (int64_t i = 0; i < scaled.numel(); ++i) smean += scaled[i];
    smean /= double(scaled.numel());
    double svar = 0.0;
    for (int64_t i = 0; i < scaled.numel(); ++i) svar += (scaled[i] - smean) * (scaled[i] - smean);
    svar /= double(scaled.numel());
    CHECK(std::sqrt(svar) == doctest::Approx(1.0).epsilon(1e-6));

    CHECK_THROWS_AS(compute_scale_factor(ae, Tensor()), EmptyBatch);
    CHECK_THROWS_AS(compute_scale_factor(ae, Tensor({0, 1, 8, 8})), EmptyBatch);
}

TEST_CASE("a degenerate calibration batch fails loudly") {
    AutoencoderKLConfig acfg;
    acfg.channels = {8, 16};
    acfg.latent_channels = 4;
    acfg.norm_groups = 4;
    AutoencoderKL ae(acfg, RandomSource{401, 0});
    zero_params(ae);  // every encoder mean collapses to zero
    Rng rng(RandomSource{402, 0});
    Tensor calibration = draw_gaussian({2, 1, 8, 8}, rng);
    CHECK_THROWS_AS(compute_scale_factor(ae, calibration), NumericalFailure);
}

TEST_CASE("a zeroed transformer scores every token uniformly") {
    TransformerConfig tcfg;
    tcfg.vocab_size = 5;
    tcfg.max_seq_len = 8;
    tcfg.depth = 2;
    tcfg.heads = 2;
    tcfg.head_dim = 4;
    tcfg.ff_mult = 2;
    TransformerDecoder net(tcfg, RandomSource{411, 0});
    zero_params(net);

    TokenSequence seq;
    seq.vocab_size = 5;
    seq.tokens = {0, 3, 2, 4};
    const double ll = sequence_log_likelihood(net, seq);
    CHECK(ll == doctest::Approx(4.0 * std::log(1.0 / 5.0)).epsilon(1e-9));
}

TEST_CASE("sequence likelihoods normalize over the whole sequence space") {
    auto total_mass = [](int64_t vocab, int len, uint64_t seed) {
        TransformerConfig tcfg;
        tcfg.vocab_size = vocab;
        tcfg.max_seq_len = 8;
        tcfg.depth = 2;
        tcfg.heads = 2;
        tcfg.head_dim = 4;
        tcfg.ff_mult = 2;
        TransformerDecoder net(tcfg, RandomSource{seed, 0});

        int64_t n_seq = 1;
        for (int i = 0; i < len; ++i) n_seq *= vocab;
        double total = 0.0;
        for (int64_t code = 0; code < n_seq; ++code) {
            TokenSequence seq;
            seq.vocab_size = vocab;
            seq.tokens.resize(size_t(len));
            int64_t rem = code;
            for (int i = 0; i < len; ++i) {
                seq.tokens[size_t(i)] = rem % vocab;
                rem /= vocab;
            }
            const double ll = sequence_log_likelihood(net, seq);
            CHECK(ll <= 0.0);
            total += std::exp(ll);
        }
        return total;
    };

    CHECK(total_mass(2, 3, 421) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(total_mass(3, 2, 422) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("sequence scoring validates its input") {
    TransformerConfig tcfg;
    tcfg.vocab_size = 5;
    tcfg.max_seq_len = 4;
    tcfg.depth = 1;
    tcfg.heads = 2;
    tcfg.head_dim = 4;
    tcfg.ff_mult = 2;
    TransformerDecoder net(tcfg, RandomSource{431, 0});

    TokenSequence seq;
    seq.vocab_size = 5;

    seq.tokens = {};
    CHECK_THROWS_AS(sequence_log_likelihood(net, seq), EmptyInput);

    seq.tokens = {0, 1, 2, 3, 0};  // longer than max_seq_len
    CHECK_THROWS_AS(sequence_log_likelihood(net, seq), SequenceTooLong);

    seq.tokens = {0, 1};
    seq.vocab_size = 6;
    CHECK_THROWS_AS(sequence_log_likelihood(net, seq), ConfigError);

    seq.vocab_size = 5;
    seq.tokens = {0, 99};  // bad target never enters the input
    CHECK_THROWS_AS(sequence_log_likelihood(net, seq), RangeError);
    seq.tokens = {99, 0};  // bad token inside the teacher-forced input
    CHECK_THROWS_AS(sequence_log_likelihood(net, seq), TokenOutOfVocab);
}

namespace {

struct LikelihoodRig {
    VQVAE vqvae;
    TransformerDecoder net;
    Ordering ordering;

    LikelihoodRig()
        : vqvae(
              [] {
                  VQVAEConfig c;
                  c.channels = {4, 8};
                  c.latent_channels = 3;
                  c.num_embeddings = 6;
                  c.norm_groups = 4;
                  return c;
              }(),
              RandomSource{441, 0}),
          net(
              [] {
                  TransformerConfig c;
                  c.vocab_size = 7;  // 6 codebook entries + BOS
                  c.max_seq_len = 32;
                  c.depth = 2;
                  c.heads = 2;
                  c.head_dim = 4;
                  c.ff_mult = 2;
                  return c;
              }(),
              RandomSource{442, 0}),
          ordering(build_ordering(OrderingKind::s_curve, {4, 4})) {}
};

}  // namespace

TEST_CASE("image likelihoods agree with manual token extraction") {
    LikelihoodRig rig;
    Rng rng(RandomSource{443, 0});
    Tensor images = draw_uniform({2, 1, 8, 8}, rng);

    const std::vector<double> got =
        transformer_log_likelihood(rig.vqvae, rig.net, rig.ordering, images);
    REQUIRE(got.size() == 2);

    const Tensor z = vq_encode(rig.vqvae, images);
    const std::vector<int64_t> indices = vq_nearest_indices(z, rig.vqvae.codebook().entries.val());
    const int64_t sp = 16;
    for (int64_t b = 0; b < 2; ++b) {
        TokenSequence seq;
        seq.vocab_size = 7;
        seq.ordering_id = to_string(rig.ordering.kind);
        seq.tokens.resize(size_t(sp));
        for (int64_t i = 0; i < sp; ++i) {
            seq.tokens[size_t(i)] =
                indices[size_t(b * sp + rig.ordering.permutation[size_t(i)])];
        }
        CHECK(got[size_t(b)] == sequence_log_likelihood(rig.net, seq));
        CHECK(got[size_t(b)] <= 0.0);
    }

    SUBCASE("scores do not depend on batch company") {
        const std::vector<double> alone_0 =
            transformer_log_likelihood(rig.vqvae, rig.net, rig.ordering, pick_rows(images, {0}));
        const std::vector<double> swapped =
            transformer_log_likelihood(rig.vqvae, rig.net, rig.ordering, pick_rows(images, {1, 0}));
        CHECK(alone_0[0] == got[0]);
        CHECK(swapped[0] == got[1]);
        CHECK(swapped[1] == got[0]);
    }
    SUBCASE("the ordering must match the latent grid") {
        Ordering wrong = build_ordering(OrderingKind::raster, {8, 8});
        CHECK_THROWS_AS(transformer_log_likelihood(rig.vqvae, rig.net, wrong, images),
                        ShapeMismatch);
    }
}

TEST_CASE("ood scores are negated likelihoods with an auc report") {
    LikelihoodRig rig;
    Rng rng(RandomSource{451, 0});
    Tensor in_dist = draw_uniform({3, 1, 8, 8}, rng);
    Tensor out_dist = draw_uniform({2, 1, 8, 8}, rng);

    OodResult r = ood_score(rig.vqvae, rig.net, rig.ordering, in_dist, out_dist);
    const std::vector<double> ll_in =
        transformer_log_likelihood(rig.vqvae, rig.net, rig.ordering, in_dist);
    const std::vector<double> ll_out =
        transformer_log_likelihood(rig.vqvae, rig.net, rig.ordering, out_dist);
    REQUIRE(r.scores_in.size() == 3);
    REQUIRE(r.scores_out.size() == 2);
    for (size_t i = 0; i < 3; ++i) CHECK(r.scores_in[i] == -ll_in[i]);
    for (size_t i = 0; i < 2; ++i) CHECK(r.scores_out[i] == -ll_out[i]);
    CHECK(r.report.name == "ood_auc");
    CHECK(r.report.n_samples == 5);
    CHECK(r.report.value == auc(r.scores_out, r.scores_in));

    SUBCASE("identical distributions sit at chance") {
        OodResult same = ood_score(rig.vqvae, rig.net, rig.ordering, in_dist, in_dist);
        CHECK(same.report.value == 0.5);
    }
}

TEST_CASE("ood separates perfectly when the likelihoods split") {
    LikelihoodRig rig;
    Rng rng(RandomSource{461, 0});
    Tensor pool = draw_uniform({8, 1, 8, 8}, rng);
    const std::vector<double> ll = transformer_log_likelihood(rig.vqvae, rig.net, rig.ordering, pool);

    std::vector<int64_t> order(8);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) { return ll[size_t(a)] > ll[size_t(b)]; });
    REQUIRE(ll[size_t(order[3])] > ll[size_t(order[4])]);  // strict split needed for AUC 1

    Tensor in_dist = pick_rows(pool, {order[0], order[1], order[2], order[3]});
    Tensor out_dist = pick_rows(pool, {order[4], order[5], order[6], order[7]});
    OodResult r = ood_score(rig.vqvae, rig.net, rig.ordering, in_dist, out_dist);
    CHECK(r.report.value == 1.0);
}

TEST_CASE("translation with a fresh controlnet reproduces unguided sampling") {
    UNetConfig ucfg = plain_unet_cfg();
    DiffusionUNet unet(ucfg, RandomSource{471, 0});
    ControlNetConfig ccfg;
    ccfg.unet = ucfg;
    ccfg.conditioning_channels = 2;
    ccfg.conditioning_embed_channels = 8;
    ControlNet ctrl(ccfg, RandomSource{472, 0});
    NoiseSchedule s = build_schedule(ScheduleProfile::linear, 8, 1e-3, 2e-2);

    Rng cond_rng(RandomSource{473, 0});
    Tensor cond = draw_uniform({1, 2, 8, 8}, cond_rng);

    SampleOptions opts;
    opts.sampler = SamplerKind::ddim;
    opts.n_steps = 3;

    Rng a(RandomSource{474, 0});
    int64_t evals = 0;
    Tensor guided = translate(unet, ctrl, s, cond, a, opts, &evals);
    CHECK(evals == 3);
    CHECK(guided.shape() == std::vector<int64_t>{1, 1, 8, 8});

    // Zero-initialized control residuals leave the UNet untouched, so the
    // trajectory must match plain sampling draw for draw.
    Rng b(RandomSource{474, 0});
    Tensor plain = sample_images(unet, s, {1, 1, 8, 8}, b, opts);
    CHECK(bitwise_equal(guided, plain));

    // A nonzero residual must change the trajectory.
    ctrl.params().at("mid_zero.w").node()->value[0] = 0.5;
    Rng c(RandomSource{474, 0});
    Tensor nudged = translate(unet, ctrl, s, cond, c, opts);
    CHECK_FALSE(bitwise_equal(nudged, plain));

    CHECK_THROWS_AS(translate(unet, ctrl, s, Tensor({4, 4}), a, opts), ShapeMismatch);
}

TEST_CASE("nearest-neighbor resizing duplicates up and strides down") {
    Tensor small({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor up = nearest_resize(small, {4, 4});
    const double want_up[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    REQUIRE(up.numel() == 16);
    for (int64_t i = 0; i < 16; ++i) CHECK(up[i] == want_up[i]);

    Tensor big({1, 1, 4, 4});
    for (int64_t i = 0; i < 16; ++i) big[i] = double(i);
    Tensor down = nearest_resize(big, {2, 2});
    CHECK(down[0] == 0.0);
    CHECK(down[1] == 2.0);
    CHECK(down[2] == 8.0);
    CHECK(down[3] == 10.0);

    CHECK(bitwise_equal(nearest_resize(big, {4, 4}), big));

    Rng rng(RandomSource{481, 0});
    Tensor vol = draw_uniform({1, 2, 2, 2, 2}, rng);
    Tensor vol_up = nearest_resize(vol, {4, 4, 4});
    CHECK(vol_up.shape() == std::vector<int64_t>{1, 2, 4, 4, 4});
    CHECK(vol_up[0] == vol[0]);
    CHECK(vol_up[1] == vol[0]);
    CHECK(vol_up[4] == vol[0]);   // (0,1,0) still rounds to source (0,0,0)
    CHECK(vol_up[8] == vol[2]);   // (0,2,0) crosses to source (0,1,0)
    CHECK(vol_up[32] == vol[4]);  // depth 2 crosses to source depth 1

    CHECK_THROWS_AS(nearest_resize(big, {4}), ShapeMismatch);
    CHECK_THROWS_AS(nearest_resize(big, {0, 4}), RangeError);
}

TEST_CASE("noise augmentation level zero is the clean identity") {
    NoiseSchedule aug = build_schedule(ScheduleProfile::linear, 10, 1e-3, 2e-2);
    Rng src_rng(RandomSource{491, 0});
    Tensor low = draw_uniform({1, 1, 4, 4}, src_rng);

    SUBCASE("level zero returns the input and consumes no randomness") {
        Rng rng(RandomSource{492, 0});
        Tensor out = augment_low_res(low, 0, aug, rng);
        CHECK(bitwise_equal(out, low));
        Rng fresh(RandomSource{492, 0});
        CHECK(rng.normal() == fresh.normal());
    }
    SUBCASE("positive levels replay the forward process") {
        Rng rng(RandomSource{493, 0});
        Tensor got = augment_low_res(low, 3, aug, rng);
        Rng replay(RandomSource{493, 0});
        Tensor eps = draw_gaussian(low.shape(), replay);
        Tensor want = add_noise(low, eps, 3, aug);
        CHECK(bitwise_equal(got, want));
    }
    SUBCASE("levels outside the augmentation schedule are rejected") {
        Rng rng(RandomSource{494, 0});
        CHECK_THROWS_AS(augment_low_res(low, -1, aug, rng), RangeError);
        CHECK_THROWS_AS(augment_low_res(low, 11, aug, rng), RangeError);
    }
}

TEST_CASE("tile blending") {
    TileSpec spec;
    spec.tile_dims = {2, 4};
    spec.overlap = {0, 2};

    SUBCASE("constant tiles blend to the constant under both modes") {
        std::vector<PlacedTile> tiles;
        for (int64_t off : {0, 2, 4}) {
            PlacedTile t;
            t.offsets = {0, off};
            t.image = Tensor({1, 1, 2, 4}, 3.25);
            tiles.push_back(t);
        }
        for (TileBlend blend : {TileBlend::average, TileBlend::linear_ramp}) {
            spec.blend = blend;
            Tensor out = blend_tiles({1, 1, 2, 8}, tiles, spec);
            for (int64_t i = 0; i < out.numel(); ++i) {
                CHECK(out[i] == doctest::Approx(3.25).epsilon(1e-12));
            }
        }
    }
    SUBCASE("a non-overlapping partition is an exact paste") {
        TileSpec part;
        part.tile_dims = {2, 2};
        part.overlap = {0, 0};
        part.blend = TileBlend::linear_ramp;
        Rng rng(RandomSource{501, 0});
        std::vector<PlacedTile> tiles;
        Tensor want({1, 2, 2, 4});
        for (int64_t off : {0, 2}) {
            PlacedTile t;
            t.offsets = {0, off};
            t.image = draw_uniform({1, 2, 2, 2}, rng);
            for (int64_t c = 0; c < 2; ++c)
                for (int64_t r = 0; r < 2; ++r)
                    for (int64_t j = 0; j < 2; ++j)
                        want[c * 8 + r * 4 + off + j] = t.image[c * 4 + r * 2 + j];
            tiles.push_back(t);
        }
        Tensor out = blend_tiles({1, 2, 2, 4}, tiles, part);
        CHECK(bitwise_equal(out, want));
    }
    SUBCASE("uncovered pixels are an error") {
        std::vector<PlacedTile> tiles(1);
        tiles[0].offsets = {0, 0};
        tiles[0].image = Tensor({1, 1, 2, 4}, 1.0);
        CHECK_THROWS_AS(blend_tiles({1, 1, 2, 8}, tiles, spec), TilingMismatch);
        tiles[0].offsets = {0, 6};
        CHECK_THROWS_AS(blend_tiles({1, 1, 2, 8}, tiles, spec), TilingMismatch);
        CHECK_THROWS_AS(blend_tiles({1, 1, 2, 8}, {}, spec), TilingMismatch);
    }
    SUBCASE("tile and target geometry must agree") {
        std::vector<PlacedTile> tiles(1);
        tiles[0].offsets = {0, 0};
        tiles[0].image = Tensor({1, 2, 2, 8}, 1.0);  // channel mismatch
        CHECK_THROWS_AS(blend_tiles({1, 1, 2, 8}, tiles, spec), ShapeMismatch);
    }
}

namespace {

struct UpscaleRig {
    AutoencoderKL decoder;
    DiffusionUNet unet;
    NoiseSchedule schedule;
    NoiseSchedule aug;

    UpscaleRig()
        : decoder(
              [] {
                  AutoencoderKLConfig c;
                  c.channels = {8, 16};  // compression factor 2
                  c.latent_channels = 4;
                  c.norm_groups = 4;
                  return c;
              }(),
              RandomSource{511, 0}),
          unet(
              [] {
                  UNetConfig c;
                  c.in_channels = 4 + 1 + 1;  // latent + low-res + level channel
                  c.out_channels = 4;
                  c.channels = {8, 16};
                  c.attention_levels = {false, false};
                  c.head_channels = {0, 0};
                  c.num_res_blocks = 1;
                  c.norm_groups = 4;
                  return c;
              }(),
              RandomSource{512, 0}),
          schedule(build_schedule(ScheduleProfile::linear, 6, 1e-3, 2e-2)),
          aug(build_schedule(ScheduleProfile::linear, 10, 1e-3, 2e-2)) {}

    SampleOptions opts() const {
        SampleOptions o;
        o.sampler = SamplerKind::ddim;
        o.n_steps = 2;
        return o;
    }

    UpscalerConditioning cond_for(Tensor low, int level) const {
        UpscalerConditioning c;
        c.low_res = std::move(low);
        c.noise_level = level;
        c.aug_schedule = aug;
        return c;
    }
};

}  // namespace

TEST_CASE("a single tile covering the target reproduces the tile core") {
    UpscaleRig rig;
    Rng low_rng(RandomSource{521, 0});
    Tensor low = draw_uniform({1, 1, 8, 8}, low_rng);
    UpscalerConditioning cond = rig.cond_for(low, 2);

    TileSpec tiles;
    tiles.tile_dims = {16, 16};
    tiles.overlap = {0, 0};

    const RandomSource src{522, 7};
    Tensor whole = upscale(rig.unet, rig.decoder, rig.schedule, cond, tiles, 1.5, src, rig.opts());
    CHECK(whole.shape() == std::vector<int64_t>{1, 1, 16, 16});

    Rng tile_rng(src.substream(0));
    Tensor core =
        upscale_tile(rig.unet, rig.decoder, rig.schedule, cond, 1.5, tile_rng, rig.opts());
    CHECK(bitwise_equal(whole, core));
}

TEST_CASE("tiled upscaling is per-tile sampling plus blending") {
    UpscaleRig rig;
    Rng low_rng(RandomSource{531, 0});
    Tensor low = draw_uniform({1, 1, 8, 8}, low_rng);
    UpscalerConditioning cond = rig.cond_for(low, 1);

    TileSpec tiles;
    tiles.tile_dims = {16, 8};
    tiles.overlap = {0, 0};

    const RandomSource src{532, 0};
    Tensor got = upscale(rig.unet, rig.decoder, rig.schedule, cond, tiles, 2.0, src, rig.opts());

    std::vector<PlacedTile> placed;
    for (int64_t i = 0; i < 2; ++i) {
        Tensor low_tile = slice_tensor(low, 3, i * 4, 4);
        UpscalerConditioning tc = rig.cond_for(low_tile, 1);
        Rng tile_rng(src.substream(uint64_t(i)));
        PlacedTile pt;
        pt.offsets = {0, i * 8};
        pt.image =
            upscale_tile(rig.unet, rig.decoder, rig.schedule, tc, 2.0, tile_rng, rig.opts());
        placed.push_back(std::move(pt));
    }
    Tensor want = blend_tiles({1, 1, 16, 16}, placed, tiles);
    CHECK(bitwise_equal(got, want));
}

TEST_CASE("overlapping tiles run and keep the output finite") {
    UpscaleRig rig;
    Rng low_rng(RandomSource{541, 0});
    Tensor low = draw_uniform({1, 1, 8, 8}, low_rng);
    UpscalerConditioning cond = rig.cond_for(low, 0);

    TileSpec tiles;
    tiles.tile_dims = {16, 12};
    tiles.overlap = {0, 8};  // stride 4: offsets 0 and 4

    Tensor out = upscale(rig.unet, rig.decoder, rig.schedule, cond, tiles, 1.0,
                         RandomSource{542, 0}, rig.opts());
    CHECK(out.shape() == std::vector<int64_t>{1, 1, 16, 16});
    for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(std::isfinite(out[i]));
}

TEST_CASE("upscale tiling geometry is validated") {
    UpscaleRig rig;
    Rng low_rng(RandomSource{551, 0});
    Tensor low = draw_uniform({1, 1, 8, 8}, low_rng);
    UpscalerConditioning cond = rig.cond_for(low, 0);
    const RandomSource src{552, 0};

    TileSpec tiles;
    tiles.overlap = {0, 0};

    tiles.tile_dims = {16, 10};  // stride 10 misses the boundary
    CHECK_THROWS_AS(upscale(rig.unet, rig.decoder, rig.schedule, cond, tiles, 1.0, src, rig.opts()),
                    TilingMismatch);
    tiles.tile_dims = {16, 18};  // larger than the target
    CHECK_THROWS_AS(upscale(rig.unet, rig.decoder, rig.schedule, cond, tiles, 1.0, src, rig.opts()),
                    TilingMismatch);
    tiles.tile_dims = {16, 16};
    tiles.overlap = {0, 16};  // overlap must stay below the tile size
    CHECK_THROWS_AS(upscale(rig.unet, rig.decoder, rig.schedule, cond, tiles, 1.0, src, rig.opts()),
                    RangeError);
    tiles.overlap = {0, 0};
    CHECK_THROWS_AS(upscale(rig.unet, rig.decoder, rig.schedule, cond, tiles, 0.0, src, rig.opts()),
                    RangeError);

    // The tile core rejects a UNet whose channel plan does not match.
    DiffusionUNet wrong(
        [] {
            UNetConfig c;
            c.in_channels = 4;
            c.out_channels = 4;
            c.channels = {8, 16};
            c.attention_levels = {false, false};
            c.head_channels = {0, 0};
            c.norm_groups = 4;
            return c;
        }(),
        RandomSource{553, 0});
    Rng rng(RandomSource{554, 0});
    CHECK_THROWS_AS(upscale_tile(wrong, rig.decoder, rig.schedule, cond, 1.0, rng, rig.opts()),
                    ShapeMismatch);
}

TEST_SUITE_END();
