import numpy as np
import pytest

from nanovlm.imaging import load_normalize, patchify, synth_micrograph
from nanovlm.model import ModelConfig, init_params, micro_config
from nanovlm.tokenizer import build_vocab
from nanovlm.trainer import build_item

OVERFIT_QUESTION = "describe the overall shape and morphology of the nanomaterials"

OVERFIT_ANSWERS = {
    "particles": "scattered round particles with smooth bright surfaces",
    "fibres": "long thin fibres woven into tangled strands",
    "patterned_surface": "a patterned surface of square cells in ordered rows",
    "nanowires": "dense parallel nanowires aligned in one direction",
    "porous_sponge": "a porous sponge matrix with interconnected dark pores",
    "films": "a smooth even film with a gentle brightness gradient",
    "mems": "rectangular mems blocks with straight sharp edges",
    "tips": "a single sharp conical tip tapering to a point",
}


@pytest.fixture(scope="session")
def micro_cfg():
    return micro_config(vocab_size=16)


@pytest.fixture(scope="session")
def micro_params64(micro_cfg):
    return init_params(micro_cfg, seed=0, dtype=np.float64)


def small_model_config(vocab_size):
    """The desk-run configuration used by the heavier fixtures."""
    return ModelConfig(vocab_size=vocab_size, layers=2, max_text_len=24, max_answer_len=16)


@pytest.fixture(scope="session")
def overfit_fixture():
    """8 (image, instruction, answer) triples over distinct categories."""
    vocab = build_vocab([OVERFIT_QUESTION] + list(OVERFIT_ANSWERS.values()))
    mcfg = small_model_config(len(vocab))
    items = []
    for i, (category, answer) in enumerate(OVERFIT_ANSWERS.items()):
        png = synth_micrograph(category, seed=100 + i)
        patches = patchify(load_normalize(png)).astype(np.float32)
        items.append(build_item(patches, OVERFIT_QUESTION, answer, vocab, mcfg,
                                category=category))
    return vocab, mcfg, items
