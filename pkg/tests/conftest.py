import pytest

from pad_lreid.config import ExperimentConfig

TINY = dict(num_layers=3, embed_dim=32, num_heads=4, proj_dim=16, batch=(4, 2), g_tokens=2,
            e_tokens=2, pool_size=6, top_k=2, slot_alloc=(2, 2, 2), unfrozen_blocks=1,
            n_train_ids=6, n_test_ids=4, n_cameras=2, views_per_camera=3, n_unseen_domains=1,
            epochs_per_domain=2, warmup_epochs=2, neg_batch=8)


def tiny_config(**changes) -> ExperimentConfig:
    return ExperimentConfig().replace(**{**TINY, **changes})


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    return tiny_config()


# one (criterion, passed, detail) entry per acceptance check, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((name, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
