"""Market and sentiment data: CSV ingestion, curation, splits, synthetic markets."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PRICE_HEADER = ["date", "open", "high", "low", "close", "volume"]
SENTIMENT_HEADER = ["date", "sentiment", "news_buzz"]
PRICE_FEATURES = ("close", "open", "high", "low", "volume")

SENTIMENT_RANGE = (-5.0, 5.0)
BUZZ_RANGE = (1.0, 10.0)
IMPUTED_BUZZ = 0.0


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class AssetBar:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    volume: float

    def validate(self) -> None:
        prices = (self.open, self.high, self.low, self.close)
        if min(prices) <= 0:
            raise DataError(f"{self.date}: non-positive price")
        if self.volume < 0:
            raise DataError(f"{self.date}: negative volume")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise DataError(f"{self.date}: high/low do not bracket open/close")


@dataclass(frozen=True)
class SentimentRecord:
    date: dt.date
    sentiment: float
    news_buzz: float
    imputed: bool = False

    def validate(self) -> None:
        lo, hi = SENTIMENT_RANGE
        if not lo <= self.sentiment <= hi:
            raise DataError(f"{self.date}: sentiment {self.sentiment} outside [{lo}, {hi}]")
        if not self.imputed:
            blo, bhi = BUZZ_RANGE
            if not blo <= self.news_buzz <= bhi:
                raise DataError(f"{self.date}: news_buzz {self.news_buzz} outside [{blo}, {bhi}]")


@dataclass(frozen=True)
class AssetSeries:
    """Date-aligned per-asset price/volume and sentiment arrays.

    ``sentiment``/``news_buzz``/``imputed`` may be ``None`` until sentiment is
    attached. ``base`` holds the day-one raw values once normalized.
    """

    symbol: str
    dates: np.ndarray  # datetime64[D]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    sentiment: np.ndarray | None = None
    news_buzz: np.ndarray | None = None
    imputed: np.ndarray | None = None
    base: dict[str, float] | None = field(default=None)

    def __post_init__(self) -> None:
        n = len(self.dates)
        for name in PRICE_FEATURES + ("sentiment", "news_buzz", "imputed"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise DataError(f"{self.symbol}: {name} length {len(arr)} != {n} dates")
            if arr is not None:
                arr.setflags(write=False)
        if n > 1 and not np.all(np.diff(self.dates.astype("int64")) > 0):
            raise DataError(f"{self.symbol}: dates not strictly increasing")
        self.dates.setflags(write=False)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def normalized(self) -> bool:
        return self.base is not None

    @property
    def imputed_fraction(self) -> float:
        if self.imputed is None or len(self) == 0:
            return 0.0
        return float(self.imputed.mean())

    def features(self) -> np.ndarray:
        """(5, T) array ordered close, open, high, low, volume."""
        return np.stack([getattr(self, f) for f in PRICE_FEATURES])

    def take(self, index: np.ndarray) -> "AssetSeries":
        kw = {}
        for name in ("dates",) + PRICE_FEATURES + ("sentiment", "news_buzz", "imputed"):
            arr = getattr(self, name)
            kw[name] = None if arr is None else arr[index].copy()
        return replace(self, **kw)

    def between(self, start, end) -> "AssetSeries":
        start, end = np.datetime64(start, "D"), np.datetime64(end, "D")
        return self.take(np.flatnonzero((self.dates >= start) & (self.dates <= end)))

    @classmethod
    def from_records(cls, symbol: str, bars: list[AssetBar],
                     sentiments: list[SentimentRecord] | None = None) -> "AssetSeries":
        """Assemble a series; sentiment on non-trading days is dropped."""
        bars = sorted(bars, key=lambda b: b.date)
        dates = np.array([b.date for b in bars], dtype="datetime64[D]")
        kw = {f: np.array([getattr(b, f) for b in bars], dtype=np.float64) for f in PRICE_FEATURES}
        series = cls(symbol=symbol, dates=dates, **kw)
        if sentiments is None:
            return series
        by_date = {np.datetime64(s.date, "D"): s for s in sentiments}
        sent = np.full(len(dates), np.nan)
        buzz = np.full(len(dates), np.nan)
        for i, d in enumerate(dates):
            rec = by_date.get(d)
            if rec is not None:
                sent[i], buzz[i] = rec.sentiment, rec.news_buzz
        return replace(series, sentiment=sent, news_buzz=buzz, imputed=np.isnan(sent))

    def to_records(self) -> tuple[list[AssetBar], list[SentimentRecord]]:
        bars, sents = [], []
        for i, d in enumerate(self.dates.astype(dt.date)):
            bars.append(AssetBar(d, *(float(getattr(self, f)[i]) for f in ("open", "high", "low", "close", "volume"))))
            if self.sentiment is not None and not np.isnan(self.sentiment[i]):
                sents.append(SentimentRecord(d, float(self.sentiment[i]), float(self.news_buzz[i]),
                                             bool(self.imputed[i])))
        return bars, sents


# --- CSV ingestion --------------------------------------------------------

def _parse_date(text: str, lineno: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse date {text!r}") from None


def _parse_float(text: str, lineno: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: malformed {column} value {text!r}") from None
    if not np.isfinite(value):
        raise DataError(f"line {lineno}: non-finite {column}")
    return value


def load_csv(path: str | Path, schema: str) -> list[AssetBar] | list[SentimentRecord]:
    """Parse a price (``date,open,high,low,close,volume``) or sentiment
    (``date,sentiment,news_buzz``) CSV into date-sorted validated records.

    Raises :class:`DataError` naming the line for malformed rows, out-of-range
    values, unparsable dates, and the date for duplicated rows.
    """
    if schema not in ("price", "sentiment"):
        raise ValueError(f"unknown schema {schema!r}")
    header = PRICE_HEADER if schema == "price" else SENTIMENT_HEADER
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records = []
    seen: set[dt.date] = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        got = [h.strip().lower() for h in next(reader, [])]
        if got != header:
            raise DataError(f"{path.name}: header {got} does not match {schema} schema {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            date = _parse_date(row[0], lineno)
            if date in seen:
                raise DataError(f"line {lineno}: duplicated date {date.isoformat()}")
            seen.add(date)
            vals = [_parse_float(v, lineno, c) for v, c in zip(row[1:], header[1:])]
            rec = AssetBar(date, *vals) if schema == "price" else SentimentRecord(date, *vals)
            try:
                rec.validate()
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            records.append(rec)
    records.sort(key=lambda r: r.date)
    return records


def write_price_csv(path: str | Path, series: AssetSeries) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRICE_HEADER)
        for i, d in enumerate(series.dates):
            w.writerow([str(d)] + [repr(float(getattr(series, f)[i]))
                                   for f in ("open", "high", "low", "close", "volume")])


def write_sentiment_csv(path: str | Path, series: AssetSeries) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SENTIMENT_HEADER)
        for i, d in enumerate(series.dates):
            if series.sentiment is None or series.imputed[i]:
                continue
            w.writerow([str(d), repr(float(series.sentiment[i])), repr(float(series.news_buzz[i]))])


def load_series(symbol: str, price_path: str | Path, sentiment_path: str | Path | None = None) -> AssetSeries:
    bars = load_csv(price_path, "price")
    sents = load_csv(sentiment_path, "sentiment") if sentiment_path else []
    return AssetSeries.from_records(symbol, bars, sents)


# --- curation -------------------------------------------------------------

def fill_sentiment_gaps(series: AssetSeries) -> AssetSeries:
    """Give every bar a sentiment record; gaps become neutral (0) and are flagged imputed."""
    n = len(series)
    if series.sentiment is None:
        sent, buzz, imp = np.zeros(n), np.full(n, IMPUTED_BUZZ), np.ones(n, dtype=bool)
    else:
        missing = np.isnan(series.sentiment)
        if not missing.any():
            return series
        sent = np.where(missing, 0.0, series.sentiment)
        buzz = np.where(missing, IMPUTED_BUZZ, series.news_buzz)
        imp = series.imputed | missing
    return replace(series, sentiment=sent, news_buzz=buzz, imputed=imp)


def normalize(series: AssetSeries) -> AssetSeries:
    """Divide every price/volume feature by its day-one value."""
    if series.normalized:
        return series
    if len(series) == 0:
        raise DataError(f"{series.symbol}: empty series")
    base = {f: float(getattr(series, f)[0]) for f in PRICE_FEATURES}
    for f, v in base.items():
        if v <= 0:
            raise DataError(f"{series.symbol}: day-one {f} is {v}; cannot normalize")
    kw = {f: getattr(series, f) / base[f] for f in PRICE_FEATURES}
    return replace(series, base=base, **kw)


def denormalize(series: AssetSeries) -> AssetSeries:
    if not series.normalized:
        return series
    kw = {f: getattr(series, f) * series.base[f] for f in PRICE_FEATURES}
    return replace(series, base=None, **kw)


def align_calendar(series_set: dict[str, AssetSeries]) -> dict[str, AssetSeries]:
    """Restrict every series to the intersection of their trading dates."""
    if not series_set:
        raise DataError("no series to align")
    common = None
    for s in series_set.values():
        common = s.dates if common is None else np.intersect1d(common, s.dates)
    if len(common) == 0:
        raise DataError("calendars have an empty intersection")
    return {k: s.take(np.flatnonzero(np.isin(s.dates, common))) for k, s in series_set.items()}


# --- splits ---------------------------------------------------------------

SPLIT_NAMES = ("eam_train", "eam_predict", "sam_train", "sam_validate", "sam_experiment")


@dataclass(frozen=True)
class DatasetSplit:
    """Inclusive date ranges. The three SAM ranges are disjoint, ordered, and
    nested inside ``eam_predict``, which follows ``eam_train``."""

    eam_train: tuple[str, str] = ("2009-01-01", "2015-12-31")
    eam_predict: tuple[str, str] = ("2016-01-01", "2020-12-31")
    sam_train: tuple[str, str] = ("2016-01-01", "2018-12-31")
    sam_validate: tuple[str, str] = ("2019-01-01", "2019-12-31")
    sam_experiment: tuple[str, str] = ("2020-01-01", "2020-12-31")

    def __post_init__(self) -> None:
        r = {k: tuple(np.datetime64(d, "D") for d in getattr(self, k)) for k in SPLIT_NAMES}
        for k, (a, b) in r.items():
            if a > b:
                raise DataError(f"split {k}: start after end")
        if not r["eam_train"][1] < r["eam_predict"][0]:
            raise DataError("eam_train must end before eam_predict starts")
        sam = [r["sam_train"], r["sam_validate"], r["sam_experiment"]]
        for (a0, a1), (b0, b1) in zip(sam, sam[1:]):
            if not a1 < b0:
                raise DataError("SAM ranges must be disjoint and in order")
        lo, hi = r["eam_predict"]
        if sam[0][0] < lo or sam[-1][1] > hi:
            raise DataError("SAM ranges must lie inside eam_predict")

    def ranges(self) -> dict[str, tuple[np.datetime64, np.datetime64]]:
        return {k: tuple(np.datetime64(d, "D") for d in getattr(self, k)) for k in SPLIT_NAMES}


def split(series_set: dict[str, AssetSeries], spec: DatasetSplit) -> dict[str, dict[str, AssetSeries]]:
    out = {}
    for name, (a, b) in spec.ranges().items():
        part = {k: s.between(a, b) for k, s in series_set.items()}
        empty = [k for k, s in part.items() if len(s) == 0]
        if empty:
            raise DataError(f"split {name} [{a}, {b}] has no rows for {', '.join(empty)}")
        out[name] = part
    return out


# --- synthetic markets ----------------------------------------------------

@dataclass(frozen=True)
class Segment:
    length: int
    drift: float  # expected daily log-return
    volatility: float  # daily log-return std
    sentiment_bias: float = 0.0


@dataclass(frozen=True)
class SyntheticMarketSpec:
    """Segment-wise geometric random walks with leading sentiment.

    Sentiment on day t is drawn around the bias of the segment governing the
    move from t to t+1 (``sentiment_lead`` days ahead), so it carries
    information about the next-day drift sign; ``sentiment_noise`` sets how
    strongly.
    """

    regimes: dict[str, tuple[Segment, ...]]
    seed: int = 0
    start: str = "2009-01-02"
    start_price: float = 100.0
    sentiment_noise: float = 1.0
    sentiment_lead: int = 1
    base_volume: float = 1e6
    window: int = 1

    @property
    def num_assets(self) -> int:
        return len(self.regimes)

    @property
    def length(self) -> int:
        lengths = {sum(s.length for s in segs) for segs in self.regimes.values()}
        if len(lengths) != 1:
            raise DataError("all assets need the same total length")
        return lengths.pop()

    def validate(self) -> None:
        if self.length < 2 * self.window:
            raise DataError(f"synthetic length {self.length} < 2 x window {self.window}")
        for segs in self.regimes.values():
            for s in segs:
                if s.length <= 0 or s.volatility < 0:
                    raise DataError(f"bad segment {s}")


def periodic_regimes(length: int, period: int, drift: float, volatility: float,
                     bias: float, phase: int = 0) -> tuple[Segment, ...]:
    """Alternating up/down half-periods (drift +d / -d, sentiment +bias / -bias)."""
    half = max(period // 2, 1)
    signs = np.where(((np.arange(length) + phase) // half) % 2 == 0, 1.0, -1.0)
    segs = []
    start = 0
    for t in range(1, length + 1):
        if t == length or signs[t] != signs[start]:
            sg = signs[start]
            segs.append(Segment(t - start, sg * drift, volatility, sg * bias))
            start = t
    return tuple(segs)


def random_regimes(length: int, min_len: int, max_len: int, drift: float, volatility: float,
                   bias: float, rng: np.random.Generator) -> tuple[Segment, ...]:
    """Segments of uniform random length in [min_len, max_len], each with an
    independent fair-coin drift sign (sentiment bias follows the sign).
    Past prices say little about the next segment; leading sentiment does."""
    if not 1 <= min_len <= max_len:
        raise DataError(f"bad segment length range [{min_len}, {max_len}]")
    segs = []
    n = 0
    while n < length:
        L = min(int(rng.integers(min_len, max_len + 1)), length - n)
        sg = 1.0 if rng.random() < 0.5 else -1.0
        segs.append(Segment(L, sg * drift, volatility, sg * bias))
        n += L
    return tuple(segs)


def business_days(start: str, count: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(count), roll="forward")


def generate_synthetic(spec: SyntheticMarketSpec) -> dict[str, AssetSeries]:
    spec.validate()
    T = spec.length
    dates = business_days(spec.start, T)
    out = {}
    for k, (symbol, segs) in enumerate(spec.regimes.items()):
        rng = np.random.default_rng([spec.seed, k])
        drift = np.concatenate([np.full(s.length, s.drift) for s in segs])
        vol = np.concatenate([np.full(s.length, s.volatility) for s in segs])
        bias = np.concatenate([np.full(s.length, s.sentiment_bias) for s in segs])
        z = rng.standard_normal((5, T))
        logret = drift + vol * z[0]
        logret[0] = 0.0
        close = spec.start_price * np.exp(np.cumsum(logret))
        prev = np.concatenate([[close[0]], close[:-1]])
        open_ = prev * np.exp(0.25 * vol * z[1])
        high = np.maximum(open_, close) * np.exp(0.5 * vol * np.abs(z[2]))
        low = np.minimum(open_, close) * np.exp(-0.5 * vol * np.abs(z[3]))
        volume = spec.base_volume * np.exp(0.2 * z[4])
        # the move from t to t+lead is governed by bias[t+lead]
        lead = np.concatenate([bias[spec.sentiment_lead:], np.repeat(bias[-1:], spec.sentiment_lead)]) \
            if spec.sentiment_lead else bias
        noise = rng.standard_normal((2, T))
        sentiment = np.clip(lead + spec.sentiment_noise * noise[0], *SENTIMENT_RANGE)
        buzz = np.clip(1.0 + 2.0 * np.abs(noise[1]), *BUZZ_RANGE)
        out[symbol] = AssetSeries(symbol=symbol, dates=dates.copy(), open=open_, high=high, low=low,
                                  close=close, volume=volume, sentiment=sentiment, news_buzz=buzz,
                                  imputed=np.zeros(T, dtype=bool))
    return out


def prepare(series_set: dict[str, AssetSeries]) -> dict[str, AssetSeries]:
    """Fill sentiment gaps, align calendars, then normalize each series."""
    filled = {k: fill_sentiment_gaps(s) for k, s in series_set.items()}
    return {k: normalize(s) for k, s in align_calendar(filled).items()}
