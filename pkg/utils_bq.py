from google.cloud import bigquery
from google.api_core import retry
import pandas as pd
import json
import logging
from datetime import datetime
import re
from typing import Optional, Dict, List, Any

from errors import RegistryError

logger = logging.getLogger(__name__)

DEFAULT_TABLE_ID = "scenekit.runs.registry"


class RunRegistry:
    def __init__(self, table_id: str = DEFAULT_TABLE_ID, key_path=None, credentials=None, client=None):
        """Initialize with a ready client, a key file path or a credentials dict"""
        if client is not None:
            self.client = client
        else:
            if credentials:
                self.credentials = credentials
            elif key_path:
                with open(key_path) as f:
                    self.credentials = json.load(f)
            else:
                raise RegistryError("Either client, key_path or credentials must be provided")
            self.client = bigquery.Client.from_service_account_info(self.credentials)
        self.table_id = table_id
        self._ensure_table_exists()

    def _ensure_table_exists(self) -> None:
        """Create the runs table if it doesn't exist."""
        schema = [
            bigquery.SchemaField("id", "INTEGER", mode="REQUIRED"),
            bigquery.SchemaField("name", "STRING", mode="REQUIRED"),
            bigquery.SchemaField("kind", "STRING", mode="REQUIRED"),  # fit, eval-depth, dashboard
            bigquery.SchemaField("config_data", "STRING", mode="REQUIRED"),
            bigquery.SchemaField("report_data", "STRING", mode="NULLABLE"),
            bigquery.SchemaField("created_at", "TIMESTAMP", mode="REQUIRED"),
            bigquery.SchemaField("updated_at", "TIMESTAMP", mode="REQUIRED"),
            bigquery.SchemaField("version", "INTEGER", mode="REQUIRED"),
            bigquery.SchemaField("user_email", "STRING", mode="REQUIRED"),
        ]

        try:
            self.client.get_table(self.table_id)
        except Exception:
            logger.info("Creating registry table %s", self.table_id)
            table = bigquery.Table(self.table_id, schema=schema)
            self.client.create_table(table)

    @staticmethod
    def _normalize_column_names(df: pd.DataFrame) -> pd.DataFrame:
        """Normalize column names to be BigQuery compatible."""
        normalized_df = df.copy()
        for col_name in normalized_df.columns:
            clean_start = re.sub(r"^[^a-zA-Z]+", "", col_name)
            clean_name = re.sub(r"[^0-9a-zA-Z]+", "_", clean_start)
            normalized_df.rename(columns={col_name: clean_name}, inplace=True)
        return normalized_df

    @staticmethod
    def _user_param(user_email: str) -> bigquery.ScalarQueryParameter:
        return bigquery.ScalarQueryParameter("user_email", "STRING", user_email)

    @retry.Retry(predicate=retry.if_transient_error)
    def save_run(self, name: str, kind: str, config_data: Dict, report_data: Optional[Dict],
                 user_email: str) -> int:
        """Append a run record; returns its id."""
        try:
            now = datetime.now()
            run_id = int(now.timestamp() * 1000)

            run_df = pd.DataFrame({
                'id': [run_id],
                'name': [name],
                'kind': [kind],
                'config_data': [json.dumps(config_data)],
                'report_data': [json.dumps(report_data) if report_data is not None else None],
                'created_at': [now],
                'updated_at': [now],
                'version': [1],
                'user_email': [user_email],
            })
            run_df = self._normalize_column_names(run_df)

            job_config = bigquery.LoadJobConfig(
                write_disposition="WRITE_APPEND",
                schema_update_options=[bigquery.SchemaUpdateOption.ALLOW_FIELD_ADDITION]
            )
            load_job = self.client.load_table_from_dataframe(run_df, self.table_id, job_config=job_config)
            load_job.result()
            return run_id

        except Exception as e:
            raise RegistryError(f"Failed to save run: {str(e)}") from e

    @retry.Retry(predicate=retry.if_transient_error)
    def update_run(self, run_id: int, config_data: Dict, report_data: Optional[Dict], user_email: str) -> None:
        """Replace a run's config and report, bumping its version if nobody else did first."""
        try:
            version_query = f"""
            SELECT version
            FROM `{self.table_id}`
            WHERE id = @run_id
            AND user_email = @user_email
            """
            job_config = bigquery.QueryJobConfig(
                query_parameters=[
                    bigquery.ScalarQueryParameter("run_id", "INT64", run_id),
                    self._user_param(user_email),
                ]
            )
            row = next(iter(self.client.query(version_query, job_config=job_config).result()), None)
            if not row:
                raise RegistryError("Run not found or access denied")
            current_version = row.version

            update_query = f"""
            UPDATE `{self.table_id}`
            SET config_data = @config_data,
                report_data = @report_data,
                updated_at = CURRENT_TIMESTAMP(),
                version = @next_version
            WHERE id = @run_id
            AND version = @version
            AND user_email = @user_email
            """
            job_config = bigquery.QueryJobConfig(
                query_parameters=[
                    bigquery.ScalarQueryParameter("config_data", "STRING", json.dumps(config_data)),
                    bigquery.ScalarQueryParameter(
                        "report_data", "STRING", json.dumps(report_data) if report_data is not None else None),
                    bigquery.ScalarQueryParameter("next_version", "INT64", current_version + 1),
                    bigquery.ScalarQueryParameter("version", "INT64", current_version),
                    bigquery.ScalarQueryParameter("run_id", "INT64", run_id),
                    self._user_param(user_email),
                ]
            )
            update_job = self.client.query(update_query, job_config=job_config)
            update_job.result()

            if update_job.num_dml_affected_rows == 0:
                raise RegistryError("Run was modified by another process or access denied")

        except Exception as e:
            raise RegistryError(f"Failed to update run: {str(e)}") from e

    def list_runs(self, user_email: str, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        """All runs of a user, newest first."""
        try:
            where_kind = "AND kind = @kind" if kind else ""
            query = f"""
            SELECT id, name, kind, created_at, updated_at, version
            FROM `{self.table_id}`
            WHERE user_email = @user_email
            {where_kind}
            ORDER BY created_at DESC
            """
            params = [self._user_param(user_email)]
            if kind:
                params.append(bigquery.ScalarQueryParameter("kind", "STRING", kind))
            job_config = bigquery.QueryJobConfig(query_parameters=params)
            results = self.client.query(query, job_config=job_config).result()
            return [dict(row.items()) for row in results]

        except Exception as e:
            raise RegistryError(f"Failed to list runs: {str(e)}") from e

    def get_run(self, run_id: int, user_email: str) -> Optional[Dict[str, Any]]:
        """Config and report of one run, or None."""
        try:
            query = f"""
            SELECT config_data, report_data
            FROM `{self.table_id}`
            WHERE id = @run_id
            AND user_email = @user_email
            """
            job_config = bigquery.QueryJobConfig(
                query_parameters=[
                    bigquery.ScalarQueryParameter("run_id", "INT64", run_id),
                    self._user_param(user_email),
                ]
            )
            row = next(iter(self.client.query(query, job_config=job_config).result()), None)
            if not row:
                return None
            return {
                "config": json.loads(row.config_data),
                "report": json.loads(row.report_data) if row.report_data else None,
            }

        except Exception as e:
            raise RegistryError(f"Failed to get run: {str(e)}") from e

    @retry.Retry(predicate=retry.if_transient_error)
    def delete_run(self, run_id: int, user_email: str) -> None:
        try:
            query = f"""
            DELETE FROM `{self.table_id}`
            WHERE id = @run_id
            AND user_email = @user_email
            """
            job_config = bigquery.QueryJobConfig(
                query_parameters=[
                    bigquery.ScalarQueryParameter("run_id", "INT64", run_id),
                    self._user_param(user_email),
                ]
            )
            self.client.query(query, job_config=job_config).result()

        except Exception as e:
            raise RegistryError(f"Failed to delete run: {str(e)}") from e
