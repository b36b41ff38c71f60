import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from precipextent.ingest import (IngestError, ObservationTable, SeasonDef, Station,
                                 SyntheticConfig, annual_mean, daily_mean_over_years,
                                 generate_synthetic, load_observations, load_stations,
                                 save_observations, save_stations, split_by_season)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def one_station(tmp_path):
    return load_stations(write(tmp_path / "s.csv", "id,lon,lat,elev\na,10.0,47.0,500\n"))


def table_from(rows):
    df = pd.DataFrame(rows, columns=["id", "date", "prcp", "tavg"])
    df["date"] = pd.to_datetime(df["date"])
    return ObservationTable(df)


def test_single_station_file(one_station):
    assert len(one_station) == 1
    s = one_station[0]
    assert (s.id, s.lon, s.lat, s.elev) == ("a", 10.0, 47.0, 500.0)


def test_duplicate_station_id(tmp_path):
    p = write(tmp_path / "s.csv", "id,lon,lat,elev\na,10,47,500\na,11,46,300\n")
    with pytest.raises(IngestError, match="duplicate"):
        load_stations(p)


def test_coordinates_out_of_range():
    with pytest.raises(IngestError):
        Station("x", 181.0, 0.0, 0.0)
    with pytest.raises(IngestError):
        Station("x", 0.0, -91.0, 0.0)


def test_network_of_125_stations(tmp_path):
    rows = "".join(f"s{i},{10 + i * 0.01},{47 + i * 0.005},{100 + i}\n" for i in range(125))
    assert len(load_stations(write(tmp_path / "s.csv", "id,lon,lat,elev\n" + rows))) == 125


def test_empty_cell_is_missing(tmp_path, one_station):
    t = load_observations(write(tmp_path / "o.csv", "id,date,prcp,tavg\na,2000-01-01,,5.1\n"), one_station)
    assert np.isnan(t.data["prcp"].iloc[0])
    assert t.data["tavg"].iloc[0] == 5.1


@pytest.mark.parametrize("row, match", [
    ("a,2000-13-01,0,0", "malformed date"),
    ("a,2000-01-01,-1,0", "negative"),
    ("b,2000-01-01,0,0", "unknown station"),
])
def test_bad_rows(tmp_path, one_station, row, match):
    with pytest.raises(IngestError, match=match):
        load_observations(write(tmp_path / "o.csv", "id,date,prcp,tavg\n" + row + "\n"), one_station)


def test_duplicate_observation(tmp_path, one_station):
    p = write(tmp_path / "o.csv", "id,date,prcp,tavg\na,2000-01-01,1,0\na,2000-01-01,2,0\n")
    with pytest.raises(IngestError, match="duplicate"):
        load_observations(p, one_station)


def test_missing_header(tmp_path, one_station):
    with pytest.raises(IngestError):
        load_observations(write(tmp_path / "o.csv", "id,date,prcp\na,2000-01-01,1\n"), one_station)


def test_synthetic_row_count_and_round_trip(tmp_path):
    cfg = SyntheticConfig(n_stations=2, start="2000-01-01", end="2000-01-10", missing_fraction=0.3, seed=3)
    stations, table = generate_synthetic(cfg)
    assert len(table) == 20
    save_stations(stations, tmp_path / "s.csv")
    save_observations(table, tmp_path / "o.csv")
    st2 = load_stations(tmp_path / "s.csv")
    t2 = load_observations(tmp_path / "o.csv", st2)
    assert st2 == stations
    pd.testing.assert_frame_equal(t2.data, table.data)
    # second save is byte-identical to the first
    save_observations(t2, tmp_path / "o2.csv")
    assert (tmp_path / "o.csv").read_bytes() == (tmp_path / "o2.csv").read_bytes()


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(n_stations=4, start="2000-01-01", end="2000-03-31", seed=9)
    pd.testing.assert_frame_equal(generate_synthetic(cfg)[1].data, generate_synthetic(cfg)[1].data)


def test_synthetic_missing_fraction():
    _, t = generate_synthetic(SyntheticConfig(n_stations=5, start="2000-01-01", end="2000-12-31",
                                              missing_fraction=0.0))
    assert not t.data[["prcp", "tavg"]].isna().any().any()
    # 100 stations x 1000 days = 1e5 cells
    _, t = generate_synthetic(SyntheticConfig(n_stations=100, start="2000-01-01",
                                              end=str((pd.Timestamp("2000-01-01") + pd.Timedelta(days=999)).date()),
                                              missing_fraction=0.6, seed=4))
    assert len(t) == 100_000
    assert abs(t.data["prcp"].isna().mean() - 0.6) < 0.02


def test_daily_mean_examples():
    dates = pd.date_range("1950-01-01", periods=51, freq=pd.DateOffset(years=1))
    t = table_from([("a", d, 3.0, 0.0) for d in dates])
    assert daily_mean_over_years(t).loc[1, "a"] == 3.0
    t9 = table_from([("a", d, 1.0, 0.0) for d in dates[:9]])
    assert np.isnan(daily_mean_over_years(t9).loc[1, "a"])
    t11 = table_from([("a", d, float(v), 0.0) for v, d in enumerate(dates[:11])])
    assert daily_mean_over_years(t11).loc[1, "a"] == 5.0


def test_annual_mean_examples():
    d = pd.date_range("2001-01-01", "2001-12-31")
    assert np.isnan(annual_mean(table_from([("a", x, 1.0, 0) for x in d[:19]])).loc[2001, "a"])
    assert annual_mean(table_from([("a", x, 1.0, 0) for x in d])).loc[2001, "a"] == 1.0
    assert annual_mean(table_from([("a", x, float(i + 1), 0) for i, x in enumerate(d)])).loc[2001, "a"] == 183.0


def test_season_sizes_non_leap():
    d = pd.date_range("2001-01-01", "2001-12-31")
    parts = split_by_season(table_from([("a", x, 0.0, 0.0) for x in d]))
    assert {k: len(v) for k, v in parts.items()} == {"Winter": 90, "Spring": 92, "Summer": 92, "Fall": 91}


def test_season_singletons_and_empty():
    t = table_from([("a", x, 0.0, 0.0) for x in ["2001-01-15", "2001-04-15", "2001-07-15", "2001-10-15"]])
    assert all(len(v) == 1 for v in split_by_season(t).values())
    empty = table_from([])
    assert all(len(v) == 0 for v in split_by_season(empty).values())
    assert SeasonDef()(pd.DatetimeIndex(["2004-02-29"]))[0] == "Winter"


def test_season_def_round_trip():
    s = SeasonDef()
    assert SeasonDef.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        SeasonDef({1: "A"})


dates_strategy = st.lists(st.dates(min_value=pd.Timestamp("1990-01-01").date(),
                                   max_value=pd.Timestamp("2020-12-31").date()), min_size=0, max_size=60)


@given(dates_strategy)
def test_split_is_partition(dates):
    t = table_from([("a", d, 1.0, 0.0) for d in dates])
    parts = split_by_season(t)
    assert sum(len(p) for p in parts.values()) == len(t)
    seen = pd.concat([p.data for p in parts.values()]) if len(t) else t.data
    assert sorted(seen["date"]) == sorted(t.data["date"])


@given(st.lists(st.tuples(st.sampled_from(["a", "b"]), st.integers(0, 800), st.floats(0, 50)),
                min_size=1, max_size=200, unique_by=lambda r: (r[0], r[1])))
def test_means_match_brute_force(rows):
    t = table_from([(s, pd.Timestamp("2000-01-01") + pd.Timedelta(days=k), v, 0.0) for s, k, v in rows])
    got = annual_mean(t, min_count=1)
    for (year, sid), grp in t.data.groupby([t.data["date"].dt.year, "id"]):
        assert np.isclose(got.loc[year, sid], sum(grp["prcp"]) / len(grp))
    got = daily_mean_over_years(t, min_count=1)
    for (doy, sid), grp in t.data.groupby([t.data["date"].dt.dayofyear, "id"]):
        assert np.isclose(got.loc[doy, sid], sum(grp["prcp"]) / len(grp))
