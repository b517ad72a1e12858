"""Thin client over the gatekeeper API: what the CLI commands call."""

from __future__ import annotations

import time
from typing import Optional

from son.errors import PlatformError
from son.http import ApiRequest, ApiResponse, Endpoint, resolve_endpoint


class ClientError(PlatformError):
    def __init__(self, status: int, error: str, detail: str):
        super().__init__(f"{error} ({status}): {detail}")
        self.status = status
        self.error = error
        self.detail = detail


class PlatformClient:
    def __init__(self, endpoint: Endpoint | str, token: str):
        self.endpoint = resolve_endpoint(endpoint)
        self.token = token

    def _call(
        self,
        method: str,
        path: str,
        body: Optional[bytes] = None,
        query: Optional[dict] = None,
    ) -> ApiResponse:
        response = self.endpoint.send(
            ApiRequest(method=method, path=path, token=self.token, query=query or {}, body=body)
        )
        if not response.ok:
            doc = response.body if isinstance(response.body, dict) else {}
            raise ClientError(
                response.status, doc.get("error", "Error"), doc.get("detail", str(response.body))
            )
        return response

    def info(self) -> dict:
        return self._call("GET", "/platform/info").body

    def upload_package(self, archive: bytes) -> dict:
        return self._call("POST", "/packages", body=archive).body

    def instantiate(
        self, package_id: str, service: Optional[str] = None, options: Optional[dict] = None
    ) -> str:
        import json

        body = {"package_id": package_id, "options": options or {}}
        if service:
            body["service"] = service
        response = self._call("POST", "/instances", body=json.dumps(body).encode("utf-8"))
        return response.body["instance_id"]

    def status(self, instance_id: str) -> dict:
        return self._call("GET", f"/instances/{instance_id}").body

    def wait_stable(self, instance_id: str, timeout: float = 60.0, poll: float = 0.1) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            status = self.status(instance_id)
            if status["state"] in ("RUNNING", "TERMINATED", "ERROR"):
                return status
            if time.monotonic() > deadline:
                raise ClientError(408, "Timeout", f"instance {instance_id} is still settling")
            time.sleep(poll)

    def terminate(self, instance_id: str) -> dict:
        return self._call("DELETE", f"/instances/{instance_id}").body

    def metrics(
        self,
        instance_id: str,
        metric: str,
        time_from: Optional[float] = None,
        time_to: Optional[float] = None,
    ) -> list:
        query = {"name": metric}
        if time_from is not None:
            query["from"] = str(time_from)
        if time_to is not None:
            query["to"] = str(time_to)
        return self._call("GET", f"/instances/{instance_id}/metrics", query=query).body["series"]

    def create_slice(self, quota: dict, mode: str, tenant: str) -> dict:
        import json

        return self._call(
            "POST",
            "/slices",
            body=json.dumps({"quota": quota, "mode": mode, "tenant": tenant}).encode("utf-8"),
        ).body

    def delete_slice(self, slice_id: str) -> dict:
        return self._call("DELETE", f"/slices/{slice_id}").body

    def list_slices(self) -> list:
        return self._call("GET", "/slices").body["slices"]

    def register_child(self, endpoint: str, credentials: str) -> dict:
        import json

        return self._call(
            "POST",
            "/children",
            body=json.dumps({"endpoint": endpoint, "credentials": credentials}).encode("utf-8"),
        ).body
