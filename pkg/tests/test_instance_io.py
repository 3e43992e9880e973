import json

import numpy as np
import pytest

from parallel_ar.envs import get_env
from parallel_ar.instance_io import (FORMAT_VERSION, InstanceFormatError, file_env, manifest_path, read_instances,
                                     read_manifest, sha256_file, write_instances)


def test_round_trip_of_100_hcvrp_instances_is_lossless(tmp_path):
    env = get_env("hcvrp")
    insts = [env.generate(int(5 + s % 7), int(1 + s % 3), s) for s in range(100)]
    path = tmp_path / "h.jsonl"
    manifest = write_instances(insts, path, seed=0)
    back = read_instances(path)
    assert len(back) == 100 and manifest.count == 100
    for a, b in zip(insts, back):
        for name in ("depot", "coords", "demands", "capacities", "speeds"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert manifest.sha256 == sha256_file(path)


@pytest.mark.parametrize("name,n,m", [("omdcpdp", 4, 2), ("ffsp", 5, 6)])
def test_round_trip_other_environments(tmp_path, name, n, m):
    env = get_env(name, **({"stages": 3} if name == "ffsp" else {}))
    insts = [env.generate(n, m, s) for s in range(5)]
    path = tmp_path / "x.jsonl"
    write_instances(insts, path)
    back = read_instances(path)
    assert [b.to_dict() for b in back] == [a.to_dict() for a in insts]
    assert file_env(path) == name


def test_serialization_is_canonical(tmp_path):
    env = get_env("hcvrp")
    write_instances([env.generate(6, 2, 1)], tmp_path / "a.jsonl", seed=1)
    write_instances([env.generate(6, 2, 1)], tmp_path / "b.jsonl", seed=1)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert manifest_path(tmp_path / "a.jsonl").read_bytes() == manifest_path(tmp_path / "b.jsonl").read_bytes()
    line = (tmp_path / "a.jsonl").read_text().splitlines()[1]
    assert line == json.dumps(json.loads(line), sort_keys=True, separators=(",", ":"))


def test_truncated_file_names_byte_offset(tmp_path):
    env = get_env("hcvrp")
    path = tmp_path / "t.jsonl"
    write_instances([env.generate(5, 2, s) for s in range(3)], path)
    raw = path.read_bytes()
    cut = raw[: len(raw) - 40]
    path.write_bytes(cut)
    last_line_start = cut.rindex(b"\n") + 1
    with pytest.raises(InstanceFormatError, match="byte offset") as err:
        read_instances(path, verify_manifest=False)
    offset = int(str(err.value).split("byte offset ")[1].split(":")[0])
    assert offset >= last_line_start


def test_version_bump_is_rejected(tmp_path):
    env = get_env("hcvrp")
    path = tmp_path / "v.jsonl"
    write_instances([env.generate(5, 2, 0)], path)
    lines = path.read_text().splitlines()
    head = json.loads(lines[0])
    head["version"] = FORMAT_VERSION + 1
    path.write_text("\n".join([json.dumps(head)] + lines[1:]) + "\n")
    with pytest.raises(InstanceFormatError, match="version"):
        read_instances(path, verify_manifest=False)
    mp = manifest_path(path)
    m = json.loads(mp.read_text())
    m["format_version"] = FORMAT_VERSION + 1
    mp.write_text(json.dumps(m))
    with pytest.raises(InstanceFormatError, match="version"):
        read_manifest(path)


def test_hash_mismatch_and_wrong_type(tmp_path):
    env = get_env("hcvrp")
    path = tmp_path / "h.jsonl"
    write_instances([env.generate(5, 2, 0), env.generate(5, 2, 1)], path)
    text = path.read_text()
    path.write_text(text.replace("\n", "\n\n", 1))
    with pytest.raises(InstanceFormatError, match="hash"):
        read_instances(path)
    assert len(read_instances(path, verify_manifest=False)) == 2

    other = get_env("omdcpdp").generate(3, 2, 0).to_dict()
    lines = text.splitlines()
    path.write_text("\n".join(lines[:2] + [json.dumps(other)]) + "\n")
    with pytest.raises(InstanceFormatError, match="type"):
        read_instances(path, verify_manifest=False)


def test_write_rejects_mixed_or_empty(tmp_path):
    with pytest.raises(ValueError):
        write_instances([], tmp_path / "e.jsonl")
    mixed = [get_env("hcvrp").generate(3, 1, 0), get_env("omdcpdp").generate(3, 1, 0)]
    with pytest.raises(ValueError):
        write_instances(mixed, tmp_path / "m.jsonl")


def test_manifest_records_generator_version(tmp_path):
    path = tmp_path / "g.jsonl"
    write_instances([get_env("hcvrp").generate(4, 2, 3)], path, seed=3, params={"n": 4})
    m = json.loads(manifest_path(path).read_text())
    assert m["generator_version"] and m["seed"] == 3 and m["params"] == {"n": 4} and m["env"] == "hcvrp"
    assert np.isclose(read_instances(path)[0].coords, get_env("hcvrp").generate(4, 2, 3).coords).all()
