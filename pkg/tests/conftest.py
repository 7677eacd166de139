import pytest

from steersweep import load_dataset, load_model_dir
from steersweep.tokenizer import BPETokenizer
from toy import GPT2_DIR, TOKENIZER_DIR, gpt2_available, toy_config, toy_tensors, write_checkpoint

DATA_DIR = TOKENIZER_DIR.parents[2] / "data"


@pytest.fixture(scope="session")
def tokenizer():
    return BPETokenizer.from_files(TOKENIZER_DIR / "vocab.json", TOKENIZER_DIR / "merges.txt")


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def toy_weights(toy_cfg):
    return toy_tensors(toy_cfg, seed=0)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory, toy_cfg, toy_weights):
    return write_checkpoint(tmp_path_factory.mktemp("toy"), toy_cfg, toy_weights)


@pytest.fixture(scope="session")
def toy_model(toy_dir):
    """2 layers, d_model=8, d_vocab=11, no tokenizer."""
    return load_model_dir(toy_dir)


@pytest.fixture(scope="session")
def text_model_dir(tmp_path_factory):
    """4 small layers over the real GPT-2 vocabulary, so prompts can be tokenized."""
    cfg = toy_config(n_layers=4, d_model=16, n_heads=2, d_vocab=50257, n_ctx=512)
    return write_checkpoint(tmp_path_factory.mktemp("textmodel"), cfg, toy_tensors(cfg, seed=7), tokenizer=True)


@pytest.fixture(scope="session")
def text_model(text_model_dir):
    return load_model_dir(text_model_dir)


@pytest.fixture(scope="session")
def reassurance_path():
    return DATA_DIR / "reassurance.json"


@pytest.fixture(scope="session")
def reassurance(reassurance_path):
    return load_dataset(reassurance_path)


@pytest.fixture(scope="session")
def gpt2():
    if not gpt2_available():
        pytest.skip(f"GPT-2 Small checkpoint not found in {GPT2_DIR} (set STEERSWEEP_GPT2_DIR)")
    return load_model_dir(GPT2_DIR)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
