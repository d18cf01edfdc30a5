"""Paired training runs that differ in one setting."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .data import SyntheticDataset
from .model import FastMETRO, ModelConfig
from .train import TrainConfig, train

MASKING_COLUMNS = ("epoch", "loss_full", "loss_off", "pa_mpjpe_full", "pa_mpjpe_off")


def compare_masking(dataset: SyntheticDataset, config: ModelConfig, train_config: TrainConfig,
                    out_csv=None, model_seed: int = 0) -> list[dict]:
    """Train with the topology mask on and off from identical initial weights and batches."""
    logs = {}
    for mode in ("full", "off"):
        model = FastMETRO(replace(config, mask_mode=mode), dataset.topology, model_seed)
        logs[mode] = train(model, dataset, train_config).log
    rows = [{"epoch": a["epoch"], "loss_full": a["loss_total"], "loss_off": b["loss_total"],
             "pa_mpjpe_full": a["pa_mpjpe"], "pa_mpjpe_off": b["pa_mpjpe"]}
            for a, b in zip(logs["full"], logs["off"])]
    if out_csv is not None:
        with Path(out_csv).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=MASKING_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows
