import pytest
import torch

from dcvae.config import DatasetConfig, EvalConfig, ExperimentConfig, LossWeights, ModelConfig, validate

torch.set_num_threads(1)


def tiny_config(mode: str = "dc_vae", **kw) -> ExperimentConfig:
    """A few-thousand-parameter model on 64 toy images."""
    base = dict(
        mode=mode, latent_dim=8, batch_size=16, queue_capacity=32, total_iters=6, log_every=2,
        model=ModelConfig(enc_width=8, dec_width=8, disc_width=8, head_channels=4),
        dataset=DatasetConfig(name="toy", n=64, test_n=32),
        eval=EvalConfig(fid_sample_count=32, allow_small=True, grid_size=8, embedder="none", ppl_sample_count=8),
        patch_loss_start_iter=2,
    )
    base.update(kw)
    for key, cls in (("loss_weights", LossWeights), ("model", ModelConfig)):
        if isinstance(base.get(key), dict):
            base[key] = cls(**base[key])
    return validate(ExperimentConfig(**base))


@pytest.fixture
def tiny():
    return tiny_config


_VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    _VERDICTS[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
