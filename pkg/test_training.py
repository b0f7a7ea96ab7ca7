"""
Test the training loop, scheduler, config files and checkpoints
"""

import os

import numpy as np
import pytest

from checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from errors import BatchNormError, CheckpointError, ConfigError, EmptyCorpus, UnparseableCorpus
from grammar import extract_grammar
from molgraph import parse_smiles
from training import (PlateauScheduler, TrainingConfig, TrainReport, encode_means,
                      evaluate_reconstruction, parse_corpus, train)

NARROW = dict(node_dim=8, radius=2, latent_dim=4, rule_embed_dim=6, gru_hidden=8, gru_layers=2)


def narrow_config(**overrides) -> TrainingConfig:
    settings = dict(NARROW, dropout=0.0, batch_size=4, max_epochs=2)
    settings.update(overrides)
    return TrainingConfig(**settings)


# ---------------------------------------------------------------------------
# Scheduler and config
# ---------------------------------------------------------------------------

def test_plateau_scheduler_halves_after_patience():
    scheduler = PlateauScheduler(1.0, 0.5, patience=2, threshold=0.0)
    assert [scheduler.check(1.0) for _ in range(4)] == [1.0, 1.0, 1.0, 0.5]
    assert scheduler.check(0.5) == 0.5
    assert scheduler.bad_checks == 0


def test_plateau_scheduler_threshold_is_relative():
    scheduler = PlateauScheduler(1.0, 0.5, patience=0, threshold=0.1)
    scheduler.check(1.0)
    assert scheduler.check(0.95) == 0.5
    assert scheduler.check(0.5) == 0.5


def test_config_file(tmp_path, corpus_path):
    config = TrainingConfig.from_file(os.path.join(os.path.dirname(corpus_path), 'demo_train.cfg'))
    assert config.node_dim == 32 and config.gru_hidden == 64
    assert config.learning_rate == 0.0005 and config.scheduler_every == 50
    assert config.model_config().readout_dim == 32 * 4

    path = tmp_path / 'run.cfg'
    path.write_text('SEED = 3\nbatch_size=8\n')
    config = TrainingConfig.from_file(str(path), seed=9, beta=None)
    assert config.seed == 9 and config.batch_size == 8 and config.beta == 0.01


config_errors = [
    'colour = blue\n',
    'batch_size = many\n',
    'decay_factor = 1.5\n',
    'dropout = 1.0\n',
    'batch_size = 0\n',
    'learning_rate = -1\n',
]


@pytest.mark.parametrize('text', config_errors)
def test_bad_config_file(tmp_path, text):
    path = tmp_path / 'bad.cfg'
    path.write_text(text)
    with pytest.raises(ConfigError):
        TrainingConfig.from_file(str(path))


def test_report_csv(tmp_path):
    report = TrainReport(loss=[2.0, 1.5], reconstruction=[1.9, 1.4], kl=[10.0, 10.0],
                         accuracy=[0.25, 0.5], learning_rate=[5e-4, 5e-4])
    lines = report.to_csv().splitlines()
    assert lines[0] == 'epoch,loss,reconstruction,kl,accuracy,learning_rate'
    assert lines[2] == '2,1.5,1.4,10.0,0.5,0.0005'
    path = tmp_path / 'report.csv'
    report.write_csv(str(path))
    assert path.read_text() == report.to_csv()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_train_rejects_empty_and_unparseable(small_grammar):
    grammar, _ = small_grammar
    with pytest.raises(EmptyCorpus):
        train([], grammar, narrow_config())

    corpus = [parse_smiles('CCO'), parse_smiles('FC(F)(F)F'), parse_smiles('CCO'), parse_smiles('BrCBr')]
    with pytest.raises(UnparseableCorpus) as excinfo:
        parse_corpus(corpus, grammar)
    assert excinfo.value.indices == [1, 3]


def test_single_atom_batches_cannot_train():
    corpus = [parse_smiles('C')]
    grammar, _ = extract_grammar(corpus)
    with pytest.raises(BatchNormError):
        train(corpus, grammar, narrow_config(batch_size=1))


def test_single_atom_batches_are_skipped(capsys):
    corpus = [parse_smiles('C'), parse_smiles('CCO'), parse_smiles('CC')]
    grammar, _ = extract_grammar(corpus)
    _, report = train(corpus, grammar, narrow_config(batch_size=1, max_epochs=1))
    assert report.skipped_batches == 1
    assert 'Skipping batch' in capsys.readouterr().out


def test_training_is_deterministic(small_corpus, small_grammar):
    grammar, _ = small_grammar
    config = narrow_config(dropout=0.1, max_epochs=3)
    first, report_a = train(small_corpus, grammar, config)
    second, report_b = train(small_corpus, grammar, config)
    assert checkpoint_bytes(first, grammar.fingerprint()) == checkpoint_bytes(second, grammar.fingerprint())
    assert report_a.loss == report_b.loss

    other, _ = train(small_corpus, grammar, narrow_config(dropout=0.1, max_epochs=3, seed=1))
    assert checkpoint_bytes(other, grammar.fingerprint()) != checkpoint_bytes(first, grammar.fingerprint())


def test_training_reduces_loss(corpus, toy_grammar):
    grammar, _ = toy_grammar
    subset = corpus[:20]
    config = narrow_config(learning_rate=5e-3, max_epochs=60, batch_size=10)
    _, report = train(subset, grammar, config)
    assert report.epochs == 60
    assert all(np.isfinite(report.loss))
    assert report.loss[-1] < 0.7 * report.loss[0]


@pytest.mark.acceptance
def test_demo_config_halves_loss(demo_training):
    _, report = demo_training
    assert report.epochs == 200
    assert all(np.isfinite(report.loss))
    assert report.loss[-1] <= 0.5 * report.loss[0]
    assert all(a >= b for a, b in zip(report.learning_rate, report.learning_rate[1:]))


def test_memorizes_one_molecule(small_grammar):
    grammar, _ = small_grammar
    toluene = [parse_smiles('Cc1ccccc1')]
    config = narrow_config(beta=0.0, learning_rate=0.01, max_epochs=150, batch_size=1)
    params, report = train(toluene, grammar, config)
    assert report.accuracy[-1] == 1.0
    assert evaluate_reconstruction(toluene, params, grammar) == 1.0


def test_encode_means_shape(small_corpus, small_grammar):
    grammar, _ = small_grammar
    params, _ = train(small_corpus, grammar, narrow_config(max_epochs=1))
    means = encode_means(small_corpus, params)
    assert means.shape == (len(small_corpus), NARROW['latent_dim'])
    assert (np.abs(means) <= 1).all()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@pytest.fixture(scope='module')
def trained(small_corpus, small_grammar):
    grammar, _ = small_grammar
    params, _ = train(small_corpus, grammar, narrow_config(max_epochs=1))
    return params, grammar.fingerprint()


def test_checkpoint_round_trip(tmp_path, trained):
    params, digest = trained
    path = str(tmp_path / 'model.mhgg')
    save_checkpoint(path, params, digest, extra={'epochs': 1})
    loaded, header = load_checkpoint(path, expected_grammar_hash=digest)
    assert header['grammar_hash'] == digest and header['extra'] == {'epochs': 1}
    assert loaded.config == params.config
    for (name, a), (_, b) in zip(params.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    for (name, a, attr), (_, b, _) in zip(params.named_buffers(), loaded.named_buffers()):
        assert np.array_equal(getattr(a, attr), getattr(b, attr)), name
    assert checkpoint_bytes(loaded, digest, extra={'epochs': 1}) == checkpoint_bytes(params, digest, extra={'epochs': 1})


def test_checkpoint_rejects_other_grammar(tmp_path, trained):
    params, digest = trained
    path = str(tmp_path / 'model.mhgg')
    save_checkpoint(path, params, digest)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_grammar_hash='0' * 64)


def corrupt_magic(data: bytes) -> bytes:
    return b'XXXX' + data[4:]


def corrupt_version(data: bytes) -> bytes:
    return data[:4] + b'\x07\x00\x00\x00' + data[8:]


def truncate(data: bytes) -> bytes:
    return data[:-3]


def append_junk(data: bytes) -> bytes:
    return data + b'\x00'


@pytest.mark.parametrize('damage', [corrupt_magic, corrupt_version, truncate, append_junk])
def test_damaged_checkpoint(tmp_path, trained, damage):
    params, digest = trained
    path = tmp_path / 'model.mhgg'
    path.write_bytes(damage(checkpoint_bytes(params, digest)))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
