"""
Shared test fixtures: bundled corpus, small grammars and narrow model widths
"""

import os

import pytest

from grammar import extract_grammar
from model import ModelConfig
from molgraph import parse_smiles, read_corpus
from training import TrainingConfig, train

HERE = os.path.dirname(os.path.abspath(__file__))
CORPUS_PATH = os.path.join(HERE, 'data', 'corpus.smi')
TESTDATA = os.path.join(HERE, 'testdata')
DEMO_CONFIG_PATH = os.path.join(HERE, 'data', 'demo_train.cfg')

SMALL_SMILES = [
    'CCO',
    'CC(C)=O',
    'CC(=O)O',
    'C1CCCCC1',
    'c1ccccc1',
    'Cc1ccccc1',
    'Oc1ccccc1',
    'CCN',
    'C=CC=C',
    'CC#N',
    'c1ccncc1',
    'CC(C)CO',
]


@pytest.fixture(scope='session')
def corpus_path():
    return CORPUS_PATH


@pytest.fixture(scope='session')
def corpus():
    return [m for m, _ in read_corpus(CORPUS_PATH)]


@pytest.fixture(scope='session')
def toy_grammar(corpus):
    grammar, sequences = extract_grammar(corpus)
    return grammar, sequences


@pytest.fixture(scope='session')
def small_corpus():
    return [parse_smiles(s, name=s) for s in SMALL_SMILES]


@pytest.fixture(scope='session')
def small_grammar(small_corpus):
    grammar, sequences = extract_grammar(small_corpus)
    return grammar, sequences


@pytest.fixture
def tiny_config():
    return ModelConfig(node_dim=6, radius=2, latent_dim=4, rule_embed_dim=5,
                       gru_hidden=6, gru_layers=2, dropout=0.0)


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    """Run ledger in a temp directory, no Slack webhook"""
    monkeypatch.setenv('MHG_DB_PATH', str(tmp_path / 'runs.db'))
    monkeypatch.setenv('MHG_TIMEZONE', 'UTC')
    monkeypatch.setenv('MHG_DEFAULT_SEED', '0')
    monkeypatch.delenv('SLACK_WEBHOOK_URL', raising=False)
    return tmp_path


def pytest_addoption(parser):
    parser.addoption('--run-acceptance', action='store_true', default=False,
                     help='also run the full-corpus training checks (several minutes)')


def pytest_configure(config):
    config.addinivalue_line('markers', 'acceptance: full-corpus training run, skipped by default')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-acceptance'):
        return
    skip = pytest.mark.skip(reason='needs --run-acceptance')
    for item in items:
        if 'acceptance' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope='session')
def demo_training(corpus, toy_grammar):
    """Autoencoder trained on the bundled corpus with data/demo_train.cfg"""
    grammar, _ = toy_grammar
    config = TrainingConfig.from_file(DEMO_CONFIG_PATH)
    params, report = train(corpus, grammar, config)
    return params, report
