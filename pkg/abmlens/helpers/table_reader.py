import logging
from typing import List, Optional

import pandas as pd


def _normalize(col) -> str:
    return str(col).strip().replace("\n", " ").replace("\r", "").replace("\t", " ").lower()


def read_table_with_columns(
    filepath,
    columns: Optional[List[str]] = None,
) -> pd.DataFrame:
    """
    Reads a CSV artifact and selects columns by name.

    Args:
    - filepath: Path to the CSV file.
    - columns: Optional list of column names to select (case-insensitive).

    Returns:
    - A DataFrame with sanitized lowercase column names, restricted to
      ``columns`` (in that order) when given. Floats are parsed with the
      round-trip parser so values written with 17 significant digits reload
      bit-exactly.
    """
    logging.info(f"read_table_with_columns(filepath={filepath}, columns={columns})")
    df = pd.read_csv(filepath, float_precision="round_trip")
    df.columns = [_normalize(col) for col in df.columns]

    if columns:
        requested = [_normalize(col) for col in columns]
        missing = [col for col in requested if col and col not in df.columns]
        if missing:
            raise ValueError(
                f"Some requested columns were not found in the header of {filepath}: {missing}\n"
                f"Available columns: {list(df.columns)}"
            )
        df = df[requested]

    return df
