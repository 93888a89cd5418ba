class ApiError(Exception):
    """Raised by handlers; the gateway renders it as an error envelope."""

    def __init__(self, status: int, message: str, error_id: str | None = None):
        super().__init__(message)
        self.status = status
        self.message = message
        self.error_id = error_id or _DEFAULT_IDS.get(status, "error")

    def envelope(self) -> dict:
        return {"status": self.status, "message": self.message, "error_id": self.error_id}


_DEFAULT_IDS = {
    400: "bad_request",
    401: "unauthorized",
    403: "forbidden",
    404: "not_found",
    405: "method_not_allowed",
    408: "timeout",
    409: "conflict",
    413: "payload_too_large",
    500: "internal_error",
    503: "unavailable",
}


def bad_request(message, error_id="bad_request"):
    return ApiError(400, message, error_id)


def not_found(message="resource not found", error_id="not_found"):
    return ApiError(404, message, error_id)
