"""Rebuild the shipped pre-trained fixture and its recorded metrics.

Usage: python3 tools/make_fixture.py
"""

import json
import shutil
import tempfile
from pathlib import Path

from aqmeta import cli
from aqmeta.config import ExperimentConfig

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "aqmeta" / "fixtures"


def main() -> None:
    cfg_path = FIXTURES / "aq-ridge-fixture.cfg"
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig.from_file(cfg_path, {"output_dir": tmp})
        cli.cmd_train(cfg)
        shutil.copyfile(Path(tmp) / "checkpoint.aqcp", FIXTURES / "aq_ridge.aqcp")
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig.from_file(cfg_path, {"output_dir": tmp})
        row = cli.cmd_eval(FIXTURES / "aq_ridge.aqcp", cfg)
    (FIXTURES / "aq_ridge_metrics.json").write_text(json.dumps(row, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(row))


if __name__ == "__main__":
    main()
