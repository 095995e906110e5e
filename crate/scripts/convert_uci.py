"""Convert the raw UCI German credit and Adult files into headered CSVs.

Usage: python3 scripts/convert_uci.py <dir with german.data, adult.data, adult.test>
"""
import csv
import sys
from pathlib import Path

GERMAN_COLUMNS = [
    "status", "duration", "credit_history", "purpose", "credit_amount",
    "savings", "present_employment", "installment_rate", "status_sex",
    "other_debtors", "present_residence_since", "property", "age",
    "installment_plans", "housing", "number_of_existing_credits", "job",
    "number_of_people_liable_for", "telephone", "foreign_worker", "credit",
]

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num",
    "marital_status", "occupation", "relationship", "race", "sex",
    "capital_gain", "capital_loss", "hours_per_week", "native_country",
    "income",
]


def convert_german(src: Path, dst: Path) -> None:
    with open(src) as fin, open(dst, "w", newline="") as fout:
        w = csv.writer(fout, lineterminator="\n")
        w.writerow(GERMAN_COLUMNS)
        for line in fin:
            parts = line.split()
            if parts:
                w.writerow(parts)


def convert_adult(train: Path, test: Path, dst: Path) -> None:
    with open(dst, "w", newline="") as fout:
        w = csv.writer(fout, lineterminator="\n")
        w.writerow(ADULT_COLUMNS + ["split"])
        for path, tag in ((train, "train"), (test, "test")):
            with open(path) as fin:
                for line in fin:
                    line = line.strip()
                    if not line or line.startswith("|"):
                        continue
                    parts = [p.strip() for p in line.split(",")]
                    parts[-1] = parts[-1].rstrip(".")
                    w.writerow(parts + [tag])


if __name__ == "__main__":
    src = Path(sys.argv[1])
    out = Path(__file__).resolve().parent.parent / "data"
    convert_german(src / "german.data", out / "german" / "german.csv")
    convert_adult(src / "adult.data", src / "adult.test", out / "adult" / "adult.csv")
