import numpy as np
import pytest

from mtner.corpus import SynthConfig, build_vocab, generate_synthetic
from mtner.model import ModelConfig, MultiTaskNER
from mtner.typebase import lexicon_from_corpus


class Toy:
    """A small synthetic corpus with its vocabulary and lexicon weights."""

    def __init__(self, n_sentences=40, seed=0, **synth):
        self.synth = SynthConfig(n_sentences=n_sentences, **synth)
        self.corpus = generate_synthetic(self.synth, seed)
        self.vocab = build_vocab(self.corpus)
        self.type_names = self.synth.type_names()
        self.lexicon = lexicon_from_corpus(self.corpus, self.type_names)
        self.weights = self.lexicon.weight_matrix(self.vocab)

    def config(self, **kw):
        kw.setdefault("d_h", 8)
        return ModelConfig(vocab_size=len(self.vocab), n_types=len(self.type_names), **kw)

    def model(self, seed=0, **kw):
        return MultiTaskNER(self.config(**kw), self.weights, seed=seed)

    def ids(self, s):
        return self.vocab.encode(s.tokens)


@pytest.fixture(scope="session")
def toy():
    return Toy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
