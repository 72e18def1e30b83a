"""Smoke test for the tilebase extension module."""

import json
import pathlib

import tilebase

ROOT = pathlib.Path(__file__).resolve().parent.parent

STARBUCKS = {
    "type": "Feature",
    "geometry": {"type": "Point", "coordinates": [12.51133, 41.8919]},
    "properties": {"oid": 1234, "tid": "Foo", "uid": "Alice", "cid": "ShopApp", "shop-name": "Starbucks"},
}


def main():
    assert tilebase.tile_prefix_of(12.51133, 41.8919) == "ndn:/OGB/12/41/58/19/GPS-ID"
    assert tilebase.parse_name("ndn:/OGB/12/41/58/19/GPS-ID")[0] == "tile-prefix"

    t = tilebase.tessellate((12.2, 41.7, 12.8, 42.1), k=19)
    assert len(t["prefixes"]) <= 19 or t["constraintViolated"]

    anchor = tilebase.model_batch_ms(500, 100, ndb=1, h=0.0)
    assert abs(anchor - 2030.0) < 1.0, anchor

    c = tilebase.Cluster(preset="four-zones")
    reports = c.insert(STARBUCKS)
    assert all(not r["errors"] for r in reports)
    r = c.query((12.50, 41.88, 12.53, 41.90), "Foo", "ShopApp", "Alice", bf=True)
    assert [f["properties"]["oid"] for f in r["features"]] == [1234]

    feed = tilebase.ingest_gtfs(ROOT / "fixtures/gtfs/rome-metro", "https://example.org/rome.zip", "Its", "gtfs", "ops")
    assert feed["stops"] == len(feed["feature"]["geometry"]["coordinates"])
    c.insert(feed["feature"])
    r = c.query((12.3, 41.7, 12.7, 42.1), "Its", "gtfs", "ops")
    assert r["features"][0]["properties"]["URL"] == "https://example.org/rome.zip"

    c.remove(json.dumps(STARBUCKS))
    # Cached tiles stay valid until their freshness period ends.
    c.flush_caches()
    assert c.query((12.50, 41.88, 12.53, 41.90), "Foo", "ShopApp", "Alice")["features"] == []
    print("smoke ok")


if __name__ == "__main__":
    main()
