"""Dataset archives: a directory holding the two normalized CSVs plus JSON
metadata (tickers, date range, content fingerprint).

The on-disk form is deliberately plain text so archives stay inspectable
and diff-able. Loading re-runs the CSV parsers and the forward-fill
alignment; on an already-dense archive the alignment is the identity, so a
round trip reproduces the dataset exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

from shufflerl.data import (
    RATIO_COLUMNS,
    MarketDataset,
    align_forward_fill,
    load_fundamentals,
    load_prices,
)
from shufflerl.errors import DataError

PRICES_NAME = "prices.csv"
FUNDAMENTALS_NAME = "fundamentals.csv"
METADATA_NAME = "metadata.json"


def dataset_fingerprint(prices_bytes: bytes, fundamentals_bytes: bytes) -> str:
    digest = hashlib.sha256()
    digest.update(prices_bytes)
    digest.update(fundamentals_bytes)
    return f"sha256:{digest.hexdigest()}"


def save_archive(dataset: MarketDataset, directory) -> dict:
    """Write the archive and return its metadata dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    prices_path = directory / PRICES_NAME
    with open(prices_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["date", "ticker", "close"])
        for di, day in enumerate(dataset.days):
            for ti, ticker in enumerate(dataset.tickers):
                writer.writerow([day.isoformat(), ticker, repr(float(dataset.close[di, ti]))])

    fundamentals_path = directory / FUNDAMENTALS_NAME
    with open(fundamentals_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["date", "ticker", *RATIO_COLUMNS])
        for di, day in enumerate(dataset.days):
            for ti, ticker in enumerate(dataset.tickers):
                row = [day.isoformat(), ticker]
                row += [repr(float(v)) for v in dataset.ratios[di, :, ti]]
                writer.writerow(row)

    fingerprint = dataset_fingerprint(prices_path.read_bytes(), fundamentals_path.read_bytes())
    metadata = {
        "tickers": list(dataset.tickers),
        "n_days": dataset.n_days,
        "first_day": dataset.days[0].isoformat(),
        "last_day": dataset.days[-1].isoformat(),
        "fingerprint": fingerprint,
    }
    (directory / METADATA_NAME).write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return metadata


def load_archive(directory) -> tuple[MarketDataset, dict]:
    """Re-ingest an archive, verifying its recorded fingerprint."""
    directory = Path(directory)
    metadata_path = directory / METADATA_NAME
    if not metadata_path.exists():
        raise DataError(f"not a dataset archive (no {METADATA_NAME})", source=str(directory))
    metadata = json.loads(metadata_path.read_text())
    prices_path = directory / PRICES_NAME
    fundamentals_path = directory / FUNDAMENTALS_NAME
    fingerprint = dataset_fingerprint(prices_path.read_bytes(), fundamentals_path.read_bytes())
    if fingerprint != metadata.get("fingerprint"):
        raise DataError(
            f"archive content does not match its fingerprint "
            f"(recorded {metadata.get('fingerprint')}, actual {fingerprint})",
            source=str(directory),
        )
    dataset = align_forward_fill(load_prices(prices_path), load_fundamentals(fundamentals_path))
    return dataset, metadata
