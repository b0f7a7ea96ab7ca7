"""
Test the GIN encoder, VAE head, grammar-masked decoder and the loss
"""

import numpy as np
import pytest

import autodiff as ad
from autodiff import NoiseSource, Tensor, grad_check
from errors import ConfigError, InvalidTarget, ShapeMismatch
from grammar import DerivationState, RuleSequence, apply_rule, extract_grammar
from hypergraph import canonical_form, to_hypergraph
from model import (DecodeTruncated, DecoderParams, EncoderParams, GraphBatch, ModelConfig,
                   ModelParams, VaeHeadParams, decode_generate, decode_teacher_forced,
                   gin_encode, init_decoder_state, loss, teacher_targets, vae_head)
from molgraph import Molecule, parse_smiles, permute_atoms


def zero_encoder(node_dim: int, radius: int) -> EncoderParams:
    p = EncoderParams.init(node_dim, radius, np.random.default_rng(0))
    for _, t in p.named_parameters():
        t.data = np.zeros_like(t.data)
    return p


@pytest.mark.parametrize('radius,width', [(3, 1024), (5, 1536), (6, 1792), (7, 2048), (8, 2304)])
def test_readout_width(radius, width):
    config = ModelConfig(radius=radius)
    assert config.readout_dim == width
    p = EncoderParams.init(config.node_dim, radius, np.random.default_rng(0))
    assert gin_encode(parse_smiles('CCO'), p).shape == (width,)


def test_zero_weights_give_zero_readout():
    p = zero_encoder(8, 2)
    assert not gin_encode(parse_smiles('C'), p).any()


def test_two_atom_readout_by_hand():
    # C-O at width 2, one iteration, hand-set weights
    p = zero_encoder(2, 1)
    p.atom_tables[0].data[2] = [1.0, 0.0]      # carbon
    p.atom_tables[0].data[4] = [0.0, 2.0]      # oxygen
    p.atom_tables[4].data[3] = [0.5, 0.5]      # three hydrogens
    p.atom_tables[4].data[1] = [0.25, 0.0]     # one hydrogen
    p.bond_tables[0].data[0] = [-0.5, 1.0]     # single bond
    layer = p.layers[0]
    layer.eps.data[:] = 0.5
    layer.w1.data = np.array([[1.0, 2.0], [0.0, 1.0]])
    layer.bn_gamma.data = np.array([1.0, 1.0])
    layer.bn_beta.data = np.array([0.0, 0.1])
    layer.bn_stats.running_mean = np.array([0.5, -1.0])
    layer.bn_stats.running_var = np.array([4.0, 1.0])
    layer.w2.data = np.array([[1.0, -1.0], [0.5, 1.0]])
    layer.b2.data = np.array([0.1, 0.2])

    h_c = np.array([1.5, 0.5])
    h_o = np.array([0.25, 2.0])
    e = np.array([-0.5, 1.0])
    relu = lambda v: np.maximum(v, 0.0)  # noqa: E731

    def update(h_self, h_other):
        combined = 1.5 * h_self + relu(h_other + e)
        hidden = combined @ layer.w1.data
        hidden = (hidden - layer.bn_stats.running_mean) / np.sqrt(layer.bn_stats.running_var + 1e-5)
        hidden = relu(hidden * layer.bn_gamma.data + layer.bn_beta.data)
        return hidden @ layer.w2.data + layer.b2.data

    expected = np.concatenate([h_c + h_o, update(h_c, h_o) + update(h_o, h_c)])
    assert np.allclose(gin_encode(parse_smiles('CO'), p), expected, atol=1e-12)


def test_readout_is_permutation_invariant(corpus):
    p = EncoderParams.init(16, 3, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for m in corpus[:20]:
        reference = gin_encode(m, p)
        for _ in range(5):
            relabeled = permute_atoms(m, rng.permutation(m.num_atoms).tolist())
            assert np.allclose(gin_encode(relabeled, p), reference, rtol=1e-9, atol=1e-9)


def test_batched_readout_matches_single(small_corpus):
    p = EncoderParams.init(8, 2, np.random.default_rng(3))
    batched = gin_encode(small_corpus, p)
    for i, m in enumerate(small_corpus):
        assert np.allclose(batched[i], gin_encode(m, p), atol=1e-10)


def test_distinct_molecules_get_distinct_readouts():
    p = EncoderParams.init(16, 3, np.random.default_rng(4))
    a = gin_encode(parse_smiles('CC(C)Cc1ccccc1'), p)
    b = gin_encode(parse_smiles('CCCCc1ccccc1'), p)
    assert not np.allclose(a, b)


def test_graph_batch_lists_bonds_both_ways():
    batch = GraphBatch.from_molecules([parse_smiles('CCO'), parse_smiles('C')])
    assert batch.num_nodes == 4 and batch.num_graphs == 2
    assert sorted(zip(batch.src.tolist(), batch.dst.tolist())) == [(0, 1), (1, 0), (1, 2), (2, 1)]
    assert batch.graph_index.tolist() == [0, 0, 0, 1]


# ---------------------------------------------------------------------------
# VAE head and decoder state
# ---------------------------------------------------------------------------

def test_eta_zero_gives_unit_posterior():
    head = VaeHeadParams.init(12, 4, 2, 5, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    h_g = Tensor(rng.standard_normal((3, 12)))
    noise = rng.standard_normal((3, 4))
    z, mu, logvar = vae_head(h_g, head, noise)
    assert not mu.data.any() and not logvar.data.any()
    assert np.array_equal(z.data, noise)
    assert ad.gaussian_kl(mu, logvar).item() == 0.0


def test_zero_noise_gives_mean_and_bounded_outputs():
    head = VaeHeadParams.init(12, 4, 2, 5, np.random.default_rng(0))
    head.eta_mu.data[:] = 3.0
    head.eta_logvar.data[:] = -2.0
    h_g = Tensor(10.0 * np.random.default_rng(1).standard_normal((3, 12)))
    z, mu, logvar = vae_head(h_g, head, np.zeros((3, 4)))
    assert np.array_equal(z.data, mu.data)
    assert (np.abs(mu.data) <= 1).all() and (np.abs(logvar.data) <= 1).all()


def test_vae_head_shape_errors():
    head = VaeHeadParams.init(12, 4, 2, 5, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        vae_head(Tensor(np.zeros((1, 11))), head, np.zeros((1, 4)))
    with pytest.raises(ShapeMismatch):
        vae_head(Tensor(np.zeros((1, 12))), head, np.zeros((1, 3)))


def test_initial_hidden_stack_shape():
    rng = np.random.default_rng(0)
    head = VaeHeadParams.init(1024, 256, 3, 384, rng)
    decoder = DecoderParams.init(10, 128, 384, 3, rng)
    z = Tensor(rng.standard_normal((1, 256)))
    hidden = init_decoder_state(z, head, decoder)
    assert [h.shape for h in hidden] == [(1, 384)] * 3

    other = init_decoder_state(Tensor(rng.standard_normal((1, 256))), head, decoder)
    assert not np.allclose(hidden[0].data, other[0].data)

    head.w_adapter.data[:] = 0.0
    head.b_adapter.data[:] = 0.0
    assert all(not h.data.any() for h in init_decoder_state(z, head, decoder))

    with pytest.raises(ShapeMismatch):
        init_decoder_state(Tensor(np.zeros((1, 5))), head, decoder)


def test_decoder_special_tokens():
    decoder = DecoderParams.init(10, 4, 6, 1, np.random.default_rng(0))
    assert decoder.bos == 10 and decoder.pad_token == 11
    assert decoder.rule_embedding.shape == (12, 4)
    assert decoder.w_out.shape == (6, 11)


# ---------------------------------------------------------------------------
# Teacher forcing
# ---------------------------------------------------------------------------

def test_teacher_masks(toy_grammar):
    grammar, sequences = toy_grammar
    n = len(grammar)
    for seq in sequences:
        targets = teacher_targets(seq, grammar)
        assert len(targets.targets) == len(seq) + 1
        assert np.flatnonzero(targets.masks[0]).tolist() == grammar.start_rule_ids
        assert np.flatnonzero(targets.masks[-1]).tolist() == [n]
        assert targets.masks[np.arange(len(targets.targets)), targets.targets].all()
        assert targets.inputs[0] == n and targets.targets[-1] == n


def test_teacher_targets_reject_bad_sequences(small_grammar):
    grammar, sequences = small_grammar
    longest = max(sequences, key=len)
    with pytest.raises(InvalidTarget):
        teacher_targets(RuleSequence(longest.rule_ids[:-1]), grammar)
    with pytest.raises(InvalidTarget):
        teacher_targets(RuleSequence((len(grammar) + 3,)), grammar)


def test_decode_teacher_forced_rows(small_grammar, tiny_config):
    grammar, sequences = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=0)
    z = Tensor(np.random.default_rng(0).standard_normal((3, tiny_config.latent_dim)))
    out = decode_teacher_forced(z, sequences[:3], grammar, params.decoder, params.head)
    total = sum(len(s) + 1 for s in sequences[:3])
    assert out.logits.shape == (total, len(grammar) + 1)
    assert out.masks.shape == out.logits.shape
    assert sorted(out.owner.tolist()) == sorted(i for i, s in enumerate(sequences[:3]) for _ in range(len(s) + 1))
    assert out.masks[np.arange(total), out.targets].all()


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def test_greedy_decode_from_single_rule_grammar(tiny_config):
    grammar, _ = extract_grammar([parse_smiles('c1ccccc1')])
    assert len(grammar) == 1
    params = ModelParams.init(tiny_config, len(grammar), seed=1)
    rng = np.random.default_rng(0)
    for _ in range(5):
        result = decode_generate(rng.standard_normal(tiny_config.latent_dim), grammar, params)
        assert isinstance(result, Molecule)
        assert canonical_form(to_hypergraph(result)) == canonical_form(to_hypergraph(parse_smiles('c1ccccc1')))


def test_sampled_decodes_are_valid(toy_grammar, tiny_config):
    grammar, _ = toy_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=2)
    noise = NoiseSource(0)
    truncated = 0
    for i in range(1000):
        z = noise.normal('test.z', i, tiny_config.latent_dim)
        result = decode_generate(z, grammar, params, mode='sample', max_len=200,
                                 rng=noise.generator('test.sample', i))
        if isinstance(result, DecodeTruncated):
            truncated += 1
            continue
        Molecule.build(result.atoms, result.bonds)
    assert truncated <= 50


def test_greedy_decode_is_deterministic(toy_grammar, tiny_config):
    grammar, _ = toy_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=3)
    z = np.random.default_rng(5).standard_normal(tiny_config.latent_dim)
    a = decode_generate(z, grammar, params)
    b = decode_generate(z, grammar, params)
    assert canonical_form(to_hypergraph(a)) == canonical_form(to_hypergraph(b))


def test_budget_below_completion_is_truncated(tiny_config):
    grammar, _ = extract_grammar([parse_smiles('CCC')])
    params = ModelParams.init(tiny_config, len(grammar), seed=0)
    result = decode_generate(np.zeros(tiny_config.latent_dim), grammar, params, max_len=1)
    assert isinstance(result, DecodeTruncated)
    assert result.rule_ids == ()
    assert result.state.step_count == 0 and result.state.frontier


def test_decode_mode_errors(small_grammar, tiny_config):
    grammar, _ = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=0)
    with pytest.raises(ValueError):
        decode_generate(np.zeros(tiny_config.latent_dim), grammar, params, mode='beam')
    with pytest.raises(ValueError):
        decode_generate(np.zeros(tiny_config.latent_dim), grammar, params, mode='sample')


@pytest.mark.parametrize('temperature', [0.0, -1.0])
def test_sampling_needs_positive_temperature(small_grammar, tiny_config, temperature):
    grammar, _ = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=0)
    with pytest.raises(ConfigError):
        decode_generate(np.zeros(tiny_config.latent_dim), grammar, params, mode='sample',
                        temperature=temperature, rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def test_beta_zero_is_pure_reconstruction(small_corpus, small_grammar, tiny_config):
    grammar, sequences = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=0)
    params.head.eta_mu.data[:] = 0.7
    params.head.eta_logvar.data[:] = 0.4
    batch = list(zip(small_corpus[:4], sequences[:4]))
    parts = loss(batch, params, 0.0, grammar, training=False)
    assert parts.total.item() == pytest.approx(parts.reconstruction)
    assert parts.kl > 0.0
    weighted = loss(batch, params, 0.5, grammar, training=False)
    assert weighted.total.item() == pytest.approx(parts.reconstruction + 0.5 * parts.kl)


def test_confident_decoder_has_near_zero_loss(small_corpus, small_grammar, tiny_config):
    grammar, sequences = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=0)
    m, seq = small_corpus[4], sequences[4]
    assert len(seq) == 1

    # steer the output layer so every target logit dominates its step
    targets = teacher_targets(seq, grammar)
    decoder = params.decoder
    for w in decoder.gru:
        for t in (w.w_ih, w.w_hh, w.b_ih, w.b_hh):
            t.data[:] = 0.0
    decoder.w_out.data[:] = 0.0
    decoder.b_out.data[:] = -50.0
    decoder.b_out.data[targets.targets] = 50.0
    parts = loss([(m, seq)], params, 0.01, grammar, training=False)
    assert parts.total.item() < 1e-6
    assert parts.correct == parts.steps


def test_full_loss_gradient(small_corpus, small_grammar):
    grammar, sequences = small_grammar
    config = ModelConfig(node_dim=3, radius=1, latent_dim=2, rule_embed_dim=2, gru_hidden=3,
                         gru_layers=2, dropout=0.0)
    params = ModelParams.init(config, len(grammar), seed=4)
    params.head.eta_mu.data[:] = 0.8
    params.head.eta_logvar.data[:] = 0.6
    batch = list(zip(small_corpus[:4], sequences[:4]))
    latent_noise = np.random.default_rng(0).standard_normal((4, config.latent_dim))
    noise = NoiseSource(0)

    def f():
        return loss(batch, params, 0.01, grammar, training=True, noise=noise, step=0,
                    latent_noise=latent_noise).total

    assert grad_check(f, params.parameters(), floor=1e-6) < 1e-4


def test_loss_is_finite_and_kl_non_negative(small_corpus, small_grammar, tiny_config):
    grammar, sequences = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=5)
    parts = loss(list(zip(small_corpus, sequences)), params, 0.01, grammar, training=True,
                 noise=NoiseSource(1), step=0)
    assert np.isfinite(parts.total.item())
    assert parts.kl >= 0.0
    assert parts.steps == sum(len(s) + 1 for s in sequences)


def test_parameter_names_are_unique(small_grammar, tiny_config):
    grammar, _ = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=0)
    names = [name for name, _ in params.named_parameters()]
    assert len(names) == len(set(names))
    assert params.decoder.rule_embedding.shape == (len(grammar) + 2, tiny_config.rule_embed_dim)
    assert params.decoder.w_out.shape == (tiny_config.gru_hidden, len(grammar) + 1)


def test_replay_of_training_step(small_corpus, small_grammar, tiny_config):
    grammar, sequences = small_grammar
    params = ModelParams.init(tiny_config, len(grammar), seed=6)
    with ad.Tape() as tape:
        loss(list(zip(small_corpus[:3], sequences[:3])), params, 0.01, grammar, training=True,
             noise=NoiseSource(2), step=7)
    assert tape.replay_matches()


def test_apply_rule_drives_teacher_state(small_grammar):
    grammar, sequences = small_grammar
    targets = teacher_targets(sequences[0], grammar)
    state = DerivationState.initial()
    for t, rule_id in enumerate(sequences[0]):
        assert np.array_equal(targets.masks[t][:-1], grammar.applicable_rules(state))
        state = apply_rule(state, grammar.rules[rule_id])
