"""
MHG-GNN Model
GIN encoder with bond embeddings, tanh-gated VAE head, and a GRU decoder over
grammar rules whose softmax is masked to the rules the derivation can accept
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import BatchNormStats, GruWeights, NoiseSource, Tensor
from errors import ConfigError, DataError, InvalidTarget, ShapeMismatch
from grammar import DerivationState, Grammar, RuleSequence, apply_rule
from hypergraph import to_molecule
from molgraph import (ATOM_FEATURE_CARDINALITIES, BOND_FEATURE_CARDINALITIES, Molecule,
                      featurize)


@dataclass
class ModelConfig:
    node_dim: int = 256
    radius: int = 3
    latent_dim: int = 256
    rule_embed_dim: int = 128
    gru_hidden: int = 384
    gru_layers: int = 3
    dropout: float = 0.1

    @property
    def readout_dim(self) -> int:
        return self.node_dim * (self.radius + 1)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _xavier(rng: np.random.Generator, shape, name: str) -> Tensor:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _constant(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


@dataclass
class GinLayer:
    """Lin -> BN -> ReLU -> Lin, plus the self weight epsilon"""
    w1: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    w2: Tensor
    b2: Tensor
    eps: Tensor
    bn_stats: BatchNormStats


@dataclass
class EncoderParams:
    atom_tables: List[Tensor]
    bond_tables: List[Tensor]
    layers: List[GinLayer]
    node_dim: int

    @property
    def radius(self) -> int:
        return len(self.layers)

    @classmethod
    def init(cls, node_dim: int, radius: int, rng: np.random.Generator) -> 'EncoderParams':
        if radius < 1:
            raise ShapeMismatch(f'radius must be at least 1, got {radius}')
        atom_tables = [_xavier(rng, (n, node_dim), f'encoder.atom_embedding.{k}')
                       for k, n in enumerate(ATOM_FEATURE_CARDINALITIES)]
        bond_tables = [_xavier(rng, (n, node_dim), f'encoder.bond_embedding.{k}')
                       for k, n in enumerate(BOND_FEATURE_CARDINALITIES)]
        layers = []
        for k in range(radius):
            prefix = f'encoder.layer.{k}'
            layers.append(GinLayer(
                w1=_uniform(rng, node_dim, (node_dim, node_dim), f'{prefix}.w1'),
                bn_gamma=_constant(1.0, (node_dim,), f'{prefix}.bn_gamma'),
                bn_beta=_constant(0.0, (node_dim,), f'{prefix}.bn_beta'),
                w2=_uniform(rng, node_dim, (node_dim, node_dim), f'{prefix}.w2'),
                b2=_uniform(rng, node_dim, (node_dim,), f'{prefix}.b2'),
                eps=_constant(1.0, (1,), f'{prefix}.eps'),
                bn_stats=BatchNormStats.fresh(node_dim),
            ))
        return cls(atom_tables, bond_tables, layers, node_dim)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [(t.name, t) for t in self.atom_tables + self.bond_tables]
        for layer in self.layers:
            for t in (layer.w1, layer.bn_gamma, layer.bn_beta, layer.w2, layer.b2, layer.eps):
                named.append((t.name, t))
        return named


@dataclass
class VaeHeadParams:
    w_mu: Tensor
    b_mu: Tensor
    eta_mu: Tensor
    w_logvar: Tensor
    b_logvar: Tensor
    eta_logvar: Tensor
    w_adapter: Tensor
    b_adapter: Tensor
    gru_layers: int

    @property
    def latent_dim(self) -> int:
        return self.w_mu.shape[1]

    @classmethod
    def init(cls, readout_dim: int, latent_dim: int, gru_layers: int, gru_hidden: int,
             rng: np.random.Generator) -> 'VaeHeadParams':
        return cls(
            w_mu=_uniform(rng, readout_dim, (readout_dim, latent_dim), 'head.w_mu'),
            b_mu=_uniform(rng, readout_dim, (latent_dim,), 'head.b_mu'),
            eta_mu=_constant(0.0, (1,), 'head.eta_mu'),
            w_logvar=_uniform(rng, readout_dim, (readout_dim, latent_dim), 'head.w_logvar'),
            b_logvar=_uniform(rng, readout_dim, (latent_dim,), 'head.b_logvar'),
            eta_logvar=_constant(0.0, (1,), 'head.eta_logvar'),
            w_adapter=_uniform(rng, latent_dim, (latent_dim, gru_layers * gru_hidden), 'head.w_adapter'),
            b_adapter=_uniform(rng, latent_dim, (gru_layers * gru_hidden,), 'head.b_adapter'),
            gru_layers=gru_layers,
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(t.name, t) for t in (self.w_mu, self.b_mu, self.eta_mu, self.w_logvar,
                                      self.b_logvar, self.eta_logvar, self.w_adapter, self.b_adapter)]


@dataclass
class DecoderParams:
    rule_embedding: Tensor          # (rules + 2, embed): BOS at rules, padding at rules + 1
    gru: List[GruWeights]
    w_out: Tensor                   # (hidden, rules + 1): END logit at rules
    b_out: Tensor
    num_rules: int

    @property
    def bos(self) -> int:
        """Embedding row fed at step 0; the END logit column shares this index"""
        return self.num_rules

    @property
    def pad_token(self) -> int:
        return self.num_rules + 1

    @property
    def hidden(self) -> int:
        return self.gru[0].hidden

    @classmethod
    def init(cls, num_rules: int, embed_dim: int, hidden: int, layers: int,
             rng: np.random.Generator) -> 'DecoderParams':
        gru = []
        for k in range(layers):
            width = embed_dim if k == 0 else hidden
            prefix = f'decoder.gru.{k}'
            gru.append(GruWeights(
                w_ih=_uniform(rng, hidden, (width, 3 * hidden), f'{prefix}.w_ih'),
                w_hh=_uniform(rng, hidden, (hidden, 3 * hidden), f'{prefix}.w_hh'),
                b_ih=_uniform(rng, hidden, (3 * hidden,), f'{prefix}.b_ih'),
                b_hh=_uniform(rng, hidden, (3 * hidden,), f'{prefix}.b_hh'),
            ))
        return cls(
            rule_embedding=Tensor(rng.standard_normal((num_rules + 2, embed_dim)), requires_grad=True,
                                  name='decoder.rule_embedding'),
            gru=gru,
            w_out=_uniform(rng, hidden, (hidden, num_rules + 1), 'decoder.w_out'),
            b_out=_uniform(rng, hidden, (num_rules + 1,), 'decoder.b_out'),
            num_rules=num_rules,
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [(self.rule_embedding.name, self.rule_embedding)]
        for w in self.gru:
            named.extend((t.name, t) for t in (w.w_ih, w.w_hh, w.b_ih, w.b_hh))
        named.extend([(self.w_out.name, self.w_out), (self.b_out.name, self.b_out)])
        return named


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: EncoderParams
    head: VaeHeadParams
    decoder: DecoderParams

    @classmethod
    def init(cls, config: ModelConfig, num_rules: int, seed: int) -> 'ModelParams':
        rng = np.random.default_rng(seed)
        encoder = EncoderParams.init(config.node_dim, config.radius, rng)
        head = VaeHeadParams.init(config.readout_dim, config.latent_dim, config.gru_layers,
                                  config.gru_hidden, rng)
        decoder = DecoderParams.init(num_rules, config.rule_embed_dim, config.gru_hidden,
                                     config.gru_layers, rng)
        return cls(config, encoder, head, decoder)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return (self.encoder.named_parameters() + self.head.named_parameters()
                + self.decoder.named_parameters())

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> List[Tuple[str, BatchNormStats, str]]:
        """Batch-norm running statistics as (name, stats, attribute)"""
        buffers = []
        for k, layer in enumerate(self.encoder.layers):
            buffers.append((f'encoder.layer.{k}.bn_running_mean', layer.bn_stats, 'running_mean'))
            buffers.append((f'encoder.layer.{k}.bn_running_var', layer.bn_stats, 'running_var'))
        return buffers

    def round_to_float32(self):
        """Snap every value to float32 precision so an exported checkpoint reloads bit-exactly"""
        for _, t in self.named_parameters():
            t.data = t.data.astype(np.float32).astype(np.float64)
        for _, stats, attr in self.named_buffers():
            setattr(stats, attr, getattr(stats, attr).astype(np.float32).astype(np.float64))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Molecules stacked into one disconnected graph; bonds listed in both directions"""
    atom_features: np.ndarray
    bond_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_index: np.ndarray
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return len(self.graph_index)

    @classmethod
    def from_molecules(cls, molecules: Sequence[Molecule]) -> 'GraphBatch':
        atom_rows, bond_rows, src, dst, graph_index = [], [], [], [], []
        offset = 0
        for g, m in enumerate(molecules):
            features = featurize(m)
            atom_rows.append(features.atom_features)
            for i, bond in enumerate(m.bonds):
                row = features.bond_features[i]
                bond_rows.extend([row, row])
                src.extend([offset + bond.begin, offset + bond.end])
                dst.extend([offset + bond.end, offset + bond.begin])
            graph_index.extend([g] * m.num_atoms)
            offset += m.num_atoms
        return cls(
            atom_features=np.concatenate(atom_rows).reshape(-1, 9),
            bond_features=np.array(bond_rows, dtype=np.int64).reshape(-1, 3),
            src=np.array(src, dtype=np.int64),
            dst=np.array(dst, dtype=np.int64),
            graph_index=np.array(graph_index, dtype=np.int64),
            num_graphs=len(molecules),
        )


def _embed(tables: Sequence[Tensor], features: np.ndarray) -> Tensor:
    out = ad.embedding_lookup(tables[0], features[:, 0])
    for k in range(1, len(tables)):
        out = ad.add(out, ad.embedding_lookup(tables[k], features[:, k]))
    return out


def encode_batch(batch: GraphBatch, p: EncoderParams, training: bool = False,
                 noise: Optional[NoiseSource] = None, step: int = 0,
                 dropout: float = 0.0) -> Tensor:
    """
    h_i^{k+1} = MLP((1 + eps) h_i^k + sum_j ReLU(h_j^k + e_ji))
    Readout concatenates the per-molecule node sums at every depth 0..r.
    """
    h = _embed(p.atom_tables, batch.atom_features)
    e = _embed(p.bond_tables, batch.bond_features)
    readouts = [ad.segment_sum(h, batch.graph_index, batch.num_graphs)]
    for k, layer in enumerate(p.layers):
        messages = ad.relu(ad.add(ad.gather_rows(h, batch.src), e))
        aggregated = ad.segment_sum(messages, batch.dst, batch.num_nodes)
        combined = ad.add(ad.mul(h, ad.add_scalar(layer.eps, 1.0)), aggregated)
        hidden = ad.linear_map(combined, layer.w1)
        hidden = ad.relu(ad.batch_norm(hidden, layer.bn_gamma, layer.bn_beta, layer.bn_stats, training))
        h = ad.linear_map(hidden, layer.w2, layer.b2)
        if training and dropout > 0:
            h = ad.dropout(h, dropout, True, noise.uniform(f'encoder.dropout.{k}', step, h.shape))
        readouts.append(ad.segment_sum(h, batch.graph_index, batch.num_graphs))
    return ad.concat(readouts, axis=1)


def gin_encode(m: Union[Molecule, Sequence[Molecule]], p: EncoderParams) -> np.ndarray:
    """Eval-mode readout h_G; one vector for a molecule, one row per molecule for a list"""
    single = isinstance(m, Molecule)
    molecules = [m] if single else list(m)
    h_g = encode_batch(GraphBatch.from_molecules(molecules), p, training=False).numpy()
    return h_g[0] if single else h_g


# ---------------------------------------------------------------------------
# VAE head
# ---------------------------------------------------------------------------

def vae_head(h_g: Tensor, p: VaeHeadParams, noise: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
    """mu = tanh(eta_mu Lin(h_G)), logvar = tanh(eta_logvar Lin(h_G)), z = mu + exp(logvar / 2) noise"""
    if h_g.data.ndim != 2 or h_g.shape[1] != p.w_mu.shape[0]:
        raise ShapeMismatch(f'vae_head: readout {h_g.shape} for input width {p.w_mu.shape[0]}')
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (h_g.shape[0], p.latent_dim):
        raise ShapeMismatch(f'vae_head: noise {noise.shape} for latent {(h_g.shape[0], p.latent_dim)}')
    mu = ad.tanh(ad.mul(ad.linear_map(h_g, p.w_mu, p.b_mu), p.eta_mu))
    logvar = ad.tanh(ad.mul(ad.linear_map(h_g, p.w_logvar, p.b_logvar), p.eta_logvar))
    z = ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), Tensor(noise)))
    return z, mu, logvar


def init_decoder_state(z: Tensor, p: VaeHeadParams, d: DecoderParams) -> List[Tensor]:
    """Adapter output split into one initial hidden vector per GRU layer"""
    if z.data.ndim != 2 or z.shape[1] != p.latent_dim:
        raise ShapeMismatch(f'init_decoder_state: z {z.shape} for latent width {p.latent_dim}')
    if p.w_adapter.shape[1] != len(d.gru) * d.hidden:
        raise ShapeMismatch('adapter width does not split into the GRU stack')
    stacked = ad.linear_map(z, p.w_adapter, p.b_adapter)
    return [ad.slice_cols(stacked, k * d.hidden, (k + 1) * d.hidden) for k in range(len(d.gru))]


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def _gru_step(x: Tensor, hidden: List[Tensor], d: DecoderParams, training: bool, dropout: float,
              noise: Optional[NoiseSource], step: int, t: int) -> Tuple[Tensor, List[Tensor]]:
    new_hidden = []
    inp = x
    for k, weights in enumerate(d.gru):
        h = ad.gru_cell(inp, hidden[k], weights)
        new_hidden.append(h)
        inp = h
        if training and dropout > 0 and k < len(d.gru) - 1:
            inp = ad.dropout(inp, dropout, True, noise.uniform(f'decoder.dropout.{k}.{t}', step, inp.shape))
    logits = ad.linear_map(inp, d.w_out, d.b_out)
    return logits, new_hidden


@dataclass
class TeacherTargets:
    """Per-step targets and masks of one rule sequence, END included"""
    inputs: np.ndarray      # previous token per step, BOS first
    targets: np.ndarray     # rule id per step, END last
    masks: np.ndarray       # (steps, rules + 1)


def teacher_targets(seq: RuleSequence, g: Grammar) -> TeacherTargets:
    n = len(g)
    state = DerivationState.initial()
    masks = []
    for rule_id in seq:
        mask = np.append(g.applicable_rules(state), False)
        if not 0 <= rule_id < n or not mask[rule_id]:
            raise InvalidTarget(f'rule {rule_id} does not apply at step {state.step_count}')
        masks.append(mask)
        try:
            state = apply_rule(state, g.rules[rule_id])
        except DataError as e:
            raise InvalidTarget(f'sequence does not replay: {e}') from e
    if not state.is_complete:
        raise InvalidTarget('sequence leaves nonterminals unexpanded')
    end_mask = np.zeros(n + 1, dtype=bool)
    end_mask[n] = True
    masks.append(end_mask)
    ids = list(seq.rule_ids)
    return TeacherTargets(
        inputs=np.array([n] + ids, dtype=np.int64),
        targets=np.array(ids + [n], dtype=np.int64),
        masks=np.array(masks, dtype=bool),
    )


@dataclass
class TeacherForcedOutput:
    logits: Tensor          # (total steps, rules + 1), rows grouped by step then molecule
    masks: np.ndarray
    targets: np.ndarray
    owner: np.ndarray       # molecule index of each row


def decode_teacher_forced(z: Tensor, targets: Sequence[Union[RuleSequence, TeacherTargets]], g: Grammar,
                          d: DecoderParams, head: VaeHeadParams, training: bool = False,
                          dropout: float = 0.0, noise: Optional[NoiseSource] = None,
                          step: int = 0) -> TeacherForcedOutput:
    """Run the GRU over each target sequence with the previous rule as input"""
    if len(g) != d.num_rules:
        raise ShapeMismatch(f'decoder built for {d.num_rules} rules, grammar has {len(g)}')
    prepared = [t if isinstance(t, TeacherTargets) else teacher_targets(t, g) for t in targets]
    if len(prepared) != z.shape[0]:
        raise ShapeMismatch(f'{len(prepared)} targets for {z.shape[0]} latents')

    hidden = init_decoder_state(z, head, d)
    longest = max(len(p.targets) for p in prepared)
    pad = d.pad_token
    rows, masks, goals, owner = [], [], [], []
    for t in range(longest):
        tokens = np.array([p.inputs[t] if t < len(p.inputs) else pad for p in prepared])
        x = ad.embedding_lookup(d.rule_embedding, tokens)
        logits, hidden = _gru_step(x, hidden, d, training, dropout, noise, step, t)
        active = np.array([i for i, p in enumerate(prepared) if t < len(p.targets)], dtype=np.int64)
        rows.append(ad.gather_rows(logits, active))
        masks.extend(prepared[i].masks[t] for i in active)
        goals.extend(prepared[i].targets[t] for i in active)
        owner.extend(active.tolist())
    return TeacherForcedOutput(
        logits=ad.concat(rows, axis=0),
        masks=np.array(masks, dtype=bool),
        targets=np.array(goals, dtype=np.int64),
        owner=np.array(owner, dtype=np.int64),
    )


@dataclass
class DecodeTruncated:
    """A decode that could not finish inside max_len; never turned into a molecule"""
    state: DerivationState
    rule_ids: Tuple[int, ...]
    reason: str


def decode_generate(z: np.ndarray, g: Grammar, params: 'ModelParams', mode: str = 'greedy',
                    temperature: float = 1.0, max_len: int = 200,
                    rng: Optional[np.random.Generator] = None) -> Union[Molecule, DecodeTruncated]:
    """
    Generate one molecule from latent z under the grammar mask

    Each step draws from rules that still leave a terminal completion inside the
    remaining budget; once no rule qualifies the partial derivation is returned
    as DecodeTruncated.
    """
    if mode not in ('greedy', 'sample'):
        raise ValueError(f'unknown decode mode: {mode}')
    if mode == 'sample' and rng is None:
        raise ValueError('sample mode needs an rng')
    if not temperature > 0:
        raise ConfigError(f'temperature must be positive, got {temperature}')
    d, head = params.decoder, params.head
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    hidden = init_decoder_state(Tensor(z), head, d)

    state = DerivationState.initial()
    ids: List[int] = []
    token = d.bos
    while not state.is_complete:
        remaining = max_len - state.step_count
        allowed = g.budget_mask(state, remaining) if remaining > 0 else np.zeros(len(g), dtype=bool)
        if not allowed.any():
            return DecodeTruncated(state, tuple(ids), f'no completion fits in {max_len} steps')
        logits, hidden = _gru_step(ad.embedding_lookup(d.rule_embedding, np.array([token])),
                                   hidden, d, False, 0.0, None, 0, state.step_count)
        rule_logits = logits.data[0, :len(g)]
        if mode == 'greedy':
            choice = int(np.argmax(np.where(allowed, rule_logits, -np.inf)))
        else:
            probs = ad.masked_softmax(rule_logits / temperature, allowed)
            choice = int(rng.choice(len(g), p=probs))
        state = apply_rule(state, g.rules[choice])
        ids.append(choice)
        token = choice
    return to_molecule(state.current)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    reconstruction: float
    kl: float
    correct: int
    steps: int
    batch_size: int


def loss(batch: Sequence[Tuple[Molecule, Union[RuleSequence, TeacherTargets]]], params: ModelParams,
         beta: float, g: Grammar, training: bool = True, noise: Optional[NoiseSource] = None,
         step: int = 0, latent_noise: Optional[np.ndarray] = None) -> LossParts:
    """
    Mean over the batch of summed masked cross-entropy (END included) plus beta * KL
    latent_noise overrides the reparameterization draw (zeros give z = mu)
    """
    cfg = params.config
    molecules = [m for m, _ in batch]
    if noise is None:
        noise = NoiseSource(0)
    dropout = cfg.dropout if training else 0.0

    h_g = encode_batch(GraphBatch.from_molecules(molecules), params.encoder, training, noise, step, dropout)
    if latent_noise is None:
        latent_noise = noise.normal('vae.latent', step, (len(batch), cfg.latent_dim))
    z, mu, logvar = vae_head(h_g, params.head, latent_noise)
    out = decode_teacher_forced(z, [s for _, s in batch], g, params.decoder, params.head,
                                training, dropout, noise, step)

    ce = ad.masked_softmax_cross_entropy(out.logits, out.masks, out.targets)
    kl = ad.gaussian_kl(mu, logvar)
    n = len(batch)
    total = ad.scale(ad.add(ce, ad.scale(kl, beta)), 1.0 / n)

    predicted = np.argmax(np.where(out.masks, out.logits.data, -np.inf), axis=1)
    return LossParts(
        total=total,
        reconstruction=ce.item() / n,
        kl=kl.item() / n,
        correct=int((predicted == out.targets).sum()),
        steps=len(out.targets),
        batch_size=n,
    )
