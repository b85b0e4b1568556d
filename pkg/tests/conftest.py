import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # naive_reference, pe_builder

from imad.corpus import build_assembly_vocabularies
from imad.galaxy import GalaxyConfig, GalaxyModel, Vocabulary


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vocabs():
    opcodes = Vocabulary.from_tokens(["mov", "add", "xor", "push", "ret"])
    operands = Vocabulary.from_tokens(["eax", "ebx", "ecx", "0", "1", "2"])
    return opcodes, operands


@pytest.fixture
def tiny_model(tiny_vocabs):
    opcodes, operands = tiny_vocabs
    config = GalaxyConfig(d_model=12, n_heads=2, d_ff=24, block_layers=1,
                          function_layers=1, executable_layers=1, mam_hidden_layers=1)
    return GalaxyModel(opcodes, operands, config, seed=7)


@pytest.fixture(scope="session")
def isa_vocabs():
    return build_assembly_vocabularies()


MICRO_GALAXY = dict(d_model=12, n_heads=2, d_ff=24, block_layers=1,
                    function_layers=1, executable_layers=1, mam_hidden_layers=1)


@pytest.fixture(scope="session")
def micro_pipeline(tmp_path_factory):
    """A complete four-stage run on a micro corpus; shared where only the
    artifact structure matters, not model quality."""
    from imad.corpus import CorpusSizes, generate_corpus
    from imad.pipeline import TrainConfig, TrainingPipeline

    root = tmp_path_factory.mktemp("micro")
    corpus_dir = root / "corpus"
    model_dir = root / "model"
    generate_corpus(corpus_dir, sizes=CorpusSizes(40, 16, 24), seed=5,
                    mam_block_len=(5, 8))
    pipeline = TrainingPipeline(
        corpus_dir, model_dir,
        galaxy_config=GalaxyConfig(**MICRO_GALAXY),
        train_config=TrainConfig(max_epochs=2, patience=2, batch_size=8, seed=5),
        seed=5, string_threshold=2, import_threshold=2)
    results = {stage: pipeline.run_stage(stage)
               for stage in ("mam", "clone", "toplevel-code-only", "toplevel-full")}
    return {"pipeline": pipeline, "corpus_dir": corpus_dir, "model_dir": model_dir,
            "results": results}
