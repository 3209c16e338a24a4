from types import SimpleNamespace
from unittest.mock import MagicMock

import pytest

from errors import RegistryError
from utils_bq import RunRegistry

TABLE = "proj.runs.registry"


@pytest.fixture
def client():
    return MagicMock()


@pytest.fixture
def registry(client):
    return RunRegistry(table_id=TABLE, client=client)


def query_returning(client, rows, affected=1):
    job = MagicMock()
    job.result.return_value = iter(rows)
    job.num_dml_affected_rows = affected
    client.query.return_value = job
    return job


def test_requires_some_credentials():
    with pytest.raises(RegistryError):
        RunRegistry(table_id=TABLE)


def test_missing_table_is_created(client):
    client.get_table.side_effect = Exception("404")
    RunRegistry(table_id=TABLE, client=client)
    client.create_table.assert_called_once()


def test_save_run_appends_one_row(registry, client):
    run_id = registry.save_run("city", "fit", {"fit": {"iterations": 3}}, None, "a@b.c")
    df = client.load_table_from_dataframe.call_args.args[0]
    assert client.load_table_from_dataframe.call_args.args[1] == TABLE
    assert df["id"].iloc[0] == run_id
    assert df["kind"].iloc[0] == "fit" and df["report_data"].iloc[0] is None
    assert df["version"].iloc[0] == 1


def test_save_run_wraps_failures(registry, client):
    client.load_table_from_dataframe.side_effect = ValueError("quota")
    with pytest.raises(RegistryError, match="quota"):
        registry.save_run("city", "fit", {}, None, "a@b.c")


def test_normalize_column_names():
    import pandas as pd
    df = RunRegistry._normalize_column_names(pd.DataFrame({"1st value (m)": [1]}))
    assert list(df.columns) == ["st_value_m_"]


def test_update_run_of_unknown_id(registry, client):
    query_returning(client, [])
    with pytest.raises(RegistryError, match="not found"):
        registry.update_run(7, {}, None, "a@b.c")


def test_update_run_detects_concurrent_edit(registry, client):
    query_returning(client, [SimpleNamespace(version=2)], affected=0)
    with pytest.raises(RegistryError, match="modified"):
        registry.update_run(7, {"a": 1}, {"mae": 1.0}, "a@b.c")


def test_update_run_bumps_version(registry, client):
    query_returning(client, [SimpleNamespace(version=2)], affected=1)
    registry.update_run(7, {"a": 1}, None, "a@b.c")
    params = {p.name: p.value for p in client.query.call_args.kwargs["job_config"].query_parameters}
    assert params["next_version"] == 3 and params["version"] == 2


def test_list_runs_filters_by_kind(registry, client):
    row = MagicMock()
    row.items.return_value = [("id", 1), ("name", "city"), ("kind", "fit")]
    query_returning(client, [row])
    runs = registry.list_runs("a@b.c", kind="fit")
    assert runs == [{"id": 1, "name": "city", "kind": "fit"}]
    sql = client.query.call_args.args[0]
    assert "kind = @kind" in sql and TABLE in sql


def test_get_run_decodes_json(registry, client):
    query_returning(client, [SimpleNamespace(config_data='{"x": 1}', report_data='{"mae": 2.0}')])
    assert registry.get_run(1, "a@b.c") == {"config": {"x": 1}, "report": {"mae": 2.0}}
    query_returning(client, [])
    assert registry.get_run(1, "a@b.c") is None


def test_delete_run_wraps_failures(registry, client):
    client.query.side_effect = RuntimeError("denied")
    with pytest.raises(RegistryError, match="denied"):
        registry.delete_run(1, "a@b.c")
