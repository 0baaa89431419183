import numpy as np
import pytest

from ctxasr.features import build_context_table, pca_fit
from ctxasr.synth import SyntheticSpec, synth_am_corpus

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def am_setup(seed=0, pca_dim=20, **spec_kw):
    """Synthetic AM corpus plus PCA context table fit on the training part."""
    spec = SyntheticSpec(**spec_kw)
    data = synth_am_corpus(spec, seed)
    train_manifest = {u.utt_id: data.manifest[u.utt_id] for u in data.train}
    raw = build_context_table(train_manifest, data.posteriors, None, seed)
    k = min(pca_dim, len(raw) - 1)
    pca = pca_fit(np.stack([raw[u].values for u in sorted(raw)]), k)
    return data, build_context_table(data.manifest, data.posteriors, pca, seed)


@pytest.fixture(scope="session")
def small_am():
    return am_setup(seed=0, pca_dim=10, utts_per_context=10, heldout_per_context=4,
                    frames_per_utt=12, n_classes=4)
