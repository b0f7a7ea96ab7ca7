"""
Training Loop
Mini-batch beta-VAE training with Adam, plateau learning-rate decay and
gradient clipping, plus the reconstruction audit
"""

import csv
import io
from dataclasses import dataclass, field, fields
from typing import List, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values

from autodiff import Adam, NoiseSource, Tape, clip_grad_norm
from errors import (BatchNormError, ConfigError, EmptyCorpus, NonFiniteLoss, ParseError,
                    UnparseableCorpus)
from fileutil import atomic_write
from grammar import Grammar, RuleSequence
from hypergraph import canonical_form, to_hypergraph
from model import (DecodeTruncated, GraphBatch, ModelConfig, ModelParams, decode_generate,
                   encode_batch, loss, teacher_targets, vae_head)
from molgraph import Molecule


@dataclass
class TrainingConfig:
    seed: int = 0
    batch_size: int = 32
    dropout: float = 0.1
    learning_rate: float = 5e-4
    beta: float = 0.01
    scheduler_every: int = 1000
    plateau_patience: int = 3
    decay_factor: float = 0.5
    plateau_threshold: float = 1e-4
    max_epochs: int = 200
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    node_dim: int = 256
    radius: int = 3
    latent_dim: int = 256
    rule_embed_dim: int = 128
    gru_hidden: int = 384
    gru_layers: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.decay_factor < 1:
            raise ConfigError(f'decay_factor must be in (0, 1), got {self.decay_factor}')
        if self.beta < 0:
            raise ConfigError(f'beta must be non-negative, got {self.beta}')
        if not 0 <= self.dropout < 1:
            raise ConfigError(f'dropout must be in [0, 1), got {self.dropout}')
        for name in ('batch_size', 'max_epochs', 'scheduler_every', 'node_dim', 'radius',
                     'latent_dim', 'rule_embed_dim', 'gru_hidden', 'gru_layers'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be at least 1, got {getattr(self, name)}')
        if self.learning_rate <= 0:
            raise ConfigError(f'learning_rate must be positive, got {self.learning_rate}')
        if self.plateau_patience < 0:
            raise ConfigError('plateau_patience must be non-negative')

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            node_dim=self.node_dim,
            radius=self.radius,
            latent_dim=self.latent_dim,
            rule_embed_dim=self.rule_embed_dim,
            gru_hidden=self.gru_hidden,
            gru_layers=self.gru_layers,
            dropout=self.dropout,
        )

    @classmethod
    def from_file(cls, path: str, **overrides) -> 'TrainingConfig':
        """Read `key = value` lines; keys are field names, case-insensitive"""
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in dotenv_values(path).items():
            name = key.strip().lower()
            if name not in known:
                raise ConfigError(f'{path}: unknown setting {key!r}')
            if raw is None:
                raise ConfigError(f'{path}: setting {key!r} has no value')
            try:
                values[name] = known[name](raw.strip())
            except ValueError as e:
                raise ConfigError(f'{path}: {key} = {raw!r} is not a valid {known[name].__name__}') from e
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class PlateauScheduler:
    """Multiply the learning rate by `factor` after `patience` checks without relative improvement"""

    def __init__(self, lr: float, factor: float, patience: int, threshold: float):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = float('inf')
        self.bad_checks = 0

    def check(self, metric: float) -> float:
        if metric < self.best * (1 - self.threshold):
            self.best = metric
            self.bad_checks = 0
        else:
            self.bad_checks += 1
            if self.bad_checks > self.patience:
                self.lr *= self.factor
                self.bad_checks = 0
        return self.lr


@dataclass
class TrainReport:
    loss: List[float] = field(default_factory=list)
    reconstruction: List[float] = field(default_factory=list)
    kl: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)
    learning_rate: List[float] = field(default_factory=list)
    skipped_batches: int = 0

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(['epoch', 'loss', 'reconstruction', 'kl', 'accuracy', 'learning_rate'])
        for e in range(self.epochs):
            writer.writerow([e + 1, repr(self.loss[e]), repr(self.reconstruction[e]), repr(self.kl[e]),
                             repr(self.accuracy[e]), repr(self.learning_rate[e])])
        return out.getvalue()

    def write_csv(self, path: str):
        atomic_write(path, self.to_csv().encode('utf-8'))


def parse_corpus(corpus: Sequence[Molecule], grammar: Grammar) -> List[RuleSequence]:
    """Rule sequences for every molecule; UnparseableCorpus lists every failing index"""
    sequences, failed = [], []
    for i, m in enumerate(corpus):
        try:
            sequences.append(grammar.parse(m))
        except ParseError:
            failed.append(i)
    if failed:
        raise UnparseableCorpus(
            f'{len(failed)} molecule(s) do not parse under the grammar (first: {failed[:5]})', failed)
    return sequences


def train(corpus: Sequence[Molecule], grammar: Grammar, config: TrainingConfig,
          verbose: bool = False) -> Tuple[ModelParams, TrainReport]:
    """
    Train the autoencoder on every corpus molecule

    Deterministic given config.seed. Parameters come back snapped to float32
    so they equal what a checkpoint of them reloads to.
    """
    if not corpus:
        raise EmptyCorpus('cannot train on an empty corpus')
    sequences = parse_corpus(corpus, grammar)
    prepared = [teacher_targets(s, grammar) for s in sequences]
    params = ModelParams.init(config.model_config(), len(grammar), config.seed)
    optimizer = Adam(params.parameters(), config.learning_rate, (config.beta1, config.beta2),
                     config.weight_decay)
    scheduler = PlateauScheduler(config.learning_rate, config.decay_factor,
                                 config.plateau_patience, config.plateau_threshold)
    noise = NoiseSource(config.seed)
    report = TrainReport()

    n = len(corpus)
    step = 0
    window: List[float] = []
    for epoch in range(config.max_epochs):
        order = noise.generator('shuffle', epoch).permutation(n)
        totals = np.zeros(3)
        correct = steps = seen = 0
        for start in range(0, n, config.batch_size):
            index = order[start:start + config.batch_size]
            if sum(corpus[i].num_atoms for i in index) < 2:
                report.skipped_batches += 1
                print(f"⚠️  Skipping batch of {len(index)} molecule(s) with fewer than 2 atoms")
                continue
            batch = [(corpus[i], prepared[i]) for i in index]

            params.zero_grad()
            with Tape() as tape:
                parts = loss(batch, params, config.beta, grammar, training=True, noise=noise, step=step)
            value = parts.total.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f'loss became {value} at epoch {epoch + 1}, step {step}', {
                    'epoch': epoch + 1, 'step': step, 'reconstruction': parts.reconstruction,
                    'kl': parts.kl, 'learning_rate': optimizer.lr, 'batch': index.tolist(),
                })
            tape.backward(parts.total)
            clip_grad_norm(optimizer.params, config.grad_clip)
            optimizer.step()
            step += 1

            size = parts.batch_size
            totals += np.array([value, parts.reconstruction, parts.kl]) * size
            correct += parts.correct
            steps += parts.steps
            seen += size
            window.append(value)
            if step % config.scheduler_every == 0:
                optimizer.lr = scheduler.check(float(np.mean(window)))
                window = []

        if seen == 0:
            raise BatchNormError('no batch has at least 2 atoms; batch norm cannot train')
        epoch_loss, recon, kl = totals / seen
        report.loss.append(float(epoch_loss))
        report.reconstruction.append(float(recon))
        report.kl.append(float(kl))
        report.accuracy.append(correct / steps)
        report.learning_rate.append(optimizer.lr)
        if verbose:
            print(f"📈 epoch {epoch + 1}/{config.max_epochs}: loss={epoch_loss:.4f} "
                  f"recon={recon:.4f} kl={kl:.4f} acc={correct / steps:.3f} lr={optimizer.lr:.2e}")

    params.round_to_float32()
    return params, report


def encode_means(corpus: Sequence[Molecule], params: ModelParams) -> np.ndarray:
    """Eval-mode mu for every molecule"""
    h_g = encode_batch(GraphBatch.from_molecules(corpus), params.encoder, training=False)
    zeros = np.zeros((len(corpus), params.config.latent_dim))
    _, mu, _ = vae_head(h_g, params.head, zeros)
    return mu.numpy()


def evaluate_reconstruction(corpus: Sequence[Molecule], params: ModelParams, grammar: Grammar,
                            max_len: int = 200) -> float:
    """Fraction of molecules that greedy decoding from mu returns isomorphic"""
    if not corpus:
        return 0.0
    means = encode_means(corpus, params)
    hits = 0
    for m, mu in zip(corpus, means):
        decoded = decode_generate(mu, grammar, params, mode='greedy', max_len=max_len)
        if isinstance(decoded, DecodeTruncated):
            continue
        if canonical_form(to_hypergraph(decoded)) == canonical_form(to_hypergraph(m)):
            hits += 1
    return hits / len(corpus)
