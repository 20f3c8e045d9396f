"""
Confusion matrices and the three attack metrics.

GAcc  - overall accuracy.
SRec  - fraction of true source-class samples predicted as the source.
ASR   - fraction of true source-class samples predicted as the target.

SRec and ASR are None (not 0) when the data has no source-class samples.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from fldefend.data import Dataset
from fldefend.errors import ConfigurationError
from fldefend.nn import ModelParams, predict


@dataclass(frozen=True)
class MetricSnapshot:
    confusion: np.ndarray
    gacc: float
    srec: Optional[float]
    asr: Optional[float]
    pair: Tuple[int, int]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def as_dict(self) -> dict:
        return {"gacc": self.gacc, "srec": self.srec, "asr": self.asr, "pair": list(self.pair)}


def confusion_matrix(true_labels: np.ndarray, predicted: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    return sk_confusion_matrix(true_labels, predicted, labels=np.arange(1, num_classes + 1)).astype(np.int64)


def snapshot_from_confusion(confusion: np.ndarray, pair: Tuple[int, int]) -> MetricSnapshot:
    confusion = np.asarray(confusion, dtype=np.int64)
    num_classes = confusion.shape[0]
    source, target = pair
    if not (1 <= source <= num_classes and 1 <= target <= num_classes):
        raise ConfigurationError(f"pair {pair} outside classes 1..{num_classes}")
    total = confusion.sum()
    if total == 0:
        raise ConfigurationError("cannot compute metrics on an empty evaluation set")

    gacc = float(np.trace(confusion) / total)
    source_total = confusion[source - 1].sum()
    if source_total == 0:
        srec, asr = None, None
    else:
        srec = float(confusion[source - 1, source - 1] / source_total)
        asr = float(confusion[source - 1, target - 1] / source_total)
    return MetricSnapshot(confusion=confusion, gacc=gacc, srec=srec, asr=asr, pair=(int(source), int(target)))


def evaluate(model: ModelParams, data: Dataset, pair: Tuple[int, int]) -> MetricSnapshot:
    """GAcc, SRec and ASR of a model on a labeled set for the (f, g) pair."""
    if len(data) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    predicted = predict(model, data.features)
    confusion = confusion_matrix(data.labels, predicted, model.num_classes)
    return snapshot_from_confusion(confusion, pair)


def confusion_frame(snapshot: MetricSnapshot) -> pd.DataFrame:
    num_classes = snapshot.confusion.shape[0]
    df = pd.DataFrame(snapshot.confusion, columns=[f"pred_{c}" for c in range(1, num_classes + 1)])
    df.insert(0, "true", np.arange(1, num_classes + 1))
    return df


def export_confusion_csv(snapshot: MetricSnapshot, path: Union[str, Path]) -> None:
    """Row-major CSV: one row per true class, one column per predicted class."""
    confusion_frame(snapshot).to_csv(Path(path), index=False, lineterminator="\n")
