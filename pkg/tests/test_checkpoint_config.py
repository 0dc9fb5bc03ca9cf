import numpy as np
import pytest

from damba_st.checkpoint import (
    CheckpointError,
    file_digest,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from damba_st.config import ConfigError, load_gen_spec, load_run_config, parse_gen_spec, parse_run_config
from damba_st.data import default_corpus, tiny_corpus
from damba_st.model import ModelConfig
from damba_st.training import TrainConfig, TrainState, fit
from damba_st.verify import TINY_MODEL

CONFIGS = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"


def trained_state(seed=0, epochs=1):
    state = TrainState.create(ModelConfig(**TINY_MODEL), ["tiny0", "tiny1"],
                              TrainConfig(lr=1e-2, batch_size=4, seed=seed))
    fit(state, tiny_corpus(), epochs=epochs)
    return state


def test_roundtrip_is_byte_identical(tmp_path):
    state = trained_state()
    a = save_checkpoint(state, tmp_path / "a.bin", extra={"note": 1})
    b = save_checkpoint(load_checkpoint(a), tmp_path / "b.bin", extra={"note": 1})
    assert a.read_bytes() == b.read_bytes()
    assert file_digest(a) == file_digest(b)


def test_roundtrip_restores_state(tmp_path):
    state = trained_state()
    path = save_checkpoint(state, tmp_path / "c.bin")
    back = load_checkpoint(path)
    for (ka, pa), (kb, pb) in zip(state.model.named_parameters(), back.model.named_parameters()):
        assert ka == kb and np.array_equal(pa.data, pb.data)
    assert back.epoch == state.epoch == 1 and back.opt.step == state.opt.step
    assert back.rng.random() == state.rng.random()


def test_resumed_training_matches_uninterrupted(tmp_path):
    straight = trained_state(epochs=2)
    half = trained_state(epochs=1)
    resumed = load_checkpoint(save_checkpoint(half, tmp_path / "h.bin"))
    fit(resumed, tiny_corpus(), epochs=1)
    for (_, pa), (_, pb) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "missing.bin")
    (tmp_path / "short.bin").write_bytes(b"abc")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"X" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic.bin")
    good = save_checkpoint(trained_state(), tmp_path / "g.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(good[:-80])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "trunc.bin")


def test_run_config_defaults_and_paths(tmp_path):
    cfg = parse_run_config("domains = a, b\nheldout = h\nepochs = 3\n", tmp_path)
    assert cfg.domains == [tmp_path / "a", tmp_path / "b"] and cfg.heldout == tmp_path / "h"
    assert cfg.train.epochs == 3 and cfg.train.objective.alpha == 1.0 and cfg.model.patch_len == 12
    assert cfg.train.objective.c0 is None
    with pytest.raises(ConfigError, match="does not exist"):
        cfg.check_paths()


@pytest.mark.parametrize("text,line,msg", [
    ("epochs = 3\nbogus = 1\n", 2, "unknown key"),
    ("lr = 0.1\n\nlr = 0.2\n", 3, "duplicate"),
    ("# c\nepochs = x\n", 2, "cannot read"),
    ("alpha = -1\n", 1, "outside"),
    ("just words\n", 1, "key = value"),
    ("variant = other\n", 1, "outside"),
])
def test_run_config_errors_carry_line_numbers(text, line, msg):
    with pytest.raises(ConfigError, match=msg) as info:
        parse_run_config(text, source="run.cfg")
    assert info.value.line == line and f"run.cfg:{line}:" in str(info.value)


def test_run_config_model_contract_is_config_error():
    with pytest.raises(ConfigError):
        parse_run_config("history_steps = 24\n")  # only 2 patches


def test_shipped_configs_parse():
    cfg = load_run_config(CONFIGS / "train.cfg")
    assert len(cfg.domains) == 3 and cfg.train.epochs == 200
    assert (cfg.model.w1, cfg.model.w2, cfg.train.objective.beta) == (0.4, 0.6, 0.5)
    spec = load_gen_spec(CONFIGS / "corpus.spec")
    train, held = default_corpus(0)
    assert spec.domains == train + [held]


def test_gen_spec_parsing(tmp_path):
    spec = parse_gen_spec("out_dir = d\n[domain a]\nn_nodes = 4\nsteps_per_day = 24\nn_steps = 48\n"
                          "[domain b]\nnoise = 0.0\n", tmp_path)
    assert spec.out_dir == tmp_path / "d"
    assert [d.name for d in spec.domains] == ["a", "b"] and spec.domains[0].n_nodes == 4


@pytest.mark.parametrize("text,line", [
    ("[domain a]\nn_nodes = 1\n", 1),
    ("[domain a]\ncolour = red\n", 2),
    ("[domain a\n", 1),
    ("[dom a]\n", 1),
    ("[domain a]\n[domain a]\n", 2),
    ("[domain a]\nn_nodes = many\n", 2),
    ("other = 1\n", 1),
])
def test_gen_spec_errors(text, line):
    with pytest.raises(ConfigError) as info:
        parse_gen_spec(text, source="s")
    assert info.value.line == line


def test_gen_spec_needs_blocks():
    with pytest.raises(ConfigError):
        parse_gen_spec("out_dir = x\n")
