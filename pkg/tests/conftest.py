import time
from pathlib import Path

import pytest

from failurenet import cli


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """One full default-config run: generate, train, evaluate, replay.

    Shared by the release-gate tests. Wall clocks are recorded per stage;
    evaluate and replay exit codes are kept rather than asserted here because
    individual gates own those verdicts.
    """
    out = tmp_path_factory.mktemp("release")
    clocks: dict[str, float] = {}
    codes: dict[str, int] = {}
    for stage in ("generate", "train", "evaluate", "replay"):
        started = time.perf_counter()
        codes[stage] = cli.main(["--seed", "0", "--out", str(out), stage])
        clocks[stage] = time.perf_counter() - started
        if stage in ("generate", "train") and codes[stage] != 0:
            pytest.fail(f"pipeline stage {stage} exited {codes[stage]}; cannot run release gates")
    return {"out": Path(out), "clocks": clocks, "codes": codes}
