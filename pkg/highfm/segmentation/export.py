"""
Prediction export
Predicted masks as mask-only HFMP1 containers plus a per-image metrics sidecar
"""

import logging
from pathlib import Path
from typing import Callable, List, Sequence, Union

import numpy as np

from highfm import config
from highfm.datapipe.container import container_name, write_container
from highfm.datapipe.loader import iterate_batches
from highfm.datapipe.scenes import PatchSample
from highfm.errors import UndefinedMetricError
from highfm.metrics import ConfusionMatrix, confusion, iou, recall

logger = logging.getLogger(__name__)

SIDECAR_NAME = "metrics.txt"
SIDECAR_COLUMNS = ("file", "tp", "fp", "fn", "tn", "iou_pos", "recall_pos")


def mask_sample(mask: np.ndarray, source: PatchSample) -> PatchSample:
    """T=0 payload carrying only a mask."""
    return PatchSample(
        data=np.zeros((0, 0) + mask.shape, dtype=np.float32),
        timestamps=[],
        label=mask,
        location=source.location,
    )


def _metric_cell(metric: Callable[[ConfusionMatrix, str], float], cm: ConfusionMatrix) -> str:
    try:
        return f"{metric(cm, 'pos'):.6f}"
    except UndefinedMetricError:
        return "nan"


def export_predictions(
    model,
    samples: Sequence[PatchSample],
    out_dir: Union[str, Path],
    batch_size: int = config.BATCH_SIZE,
) -> List[Path]:
    """Write one mask container per sample; labeled samples also get a sidecar line."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    lines = ["\t".join(SIDECAR_COLUMNS)]
    offset = 0
    for batch in iterate_batches(samples, batch_size):
        preds = model.predict(batch.inputs, batch.timestamps)
        for pred, source in zip(preds, samples[offset : offset + len(batch)]):
            path = out / f"pred__{container_name(source)}"
            write_container(path, mask_sample(pred, source))
            written.append(path)
            if source.label is not None:
                cm = confusion(pred, source.label)
                cells = [path.name, str(cm.tp), str(cm.fp), str(cm.fn), str(cm.tn)]
                lines.append("\t".join(cells + [_metric_cell(iou, cm), _metric_cell(recall, cm)]))
        offset += len(batch)
    (out / SIDECAR_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"exported {len(written)} predicted masks to {out}")
    return written
