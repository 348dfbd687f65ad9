from typing import Any, Dict, List, Optional

# =====================================
# JERARQUÍA DE ERRORES
# =====================================


class EvoSceneError(Exception):
    """Error base del motor. Todo error propio hereda de aquí."""

    exit_code = 1
    error_code = "runtime_error"

    def to_dict(self) -> Dict[str, Any]:
        """
        Convierte el error a diccionario para la salida JSON del CLI y del servidor.
        """
        return {
            "success": False,
            "error_code": self.error_code,
            "detail": str(self),
            "exit_code": self.exit_code,
        }


class GeometryError(EvoSceneError, ValueError):
    """Invariante geométrica violada (cámara, mapa de profundidad, rejilla, malla)."""

    error_code = "geometry_error"


class NoDataError(EvoSceneError, ValueError):
    """Falta de datos de entrada ("no views", "no prior")."""

    error_code = "no_data"


class ConfigError(EvoSceneError, ValueError):
    """Configuración inválida o incompleta."""

    exit_code = 2
    error_code = "config_error"


class UsageError(ConfigError):
    """Uso incorrecto de la línea de comandos."""

    error_code = "usage_error"


class BackendError(EvoSceneError):
    """Fallo de un backend (depth / complete / synthesize)."""

    error_code = "backend_error"


class TransportError(BackendError):
    """Reintentos agotados contra un endpoint remoto."""

    error_code = "transport_error"

    def __init__(self, message: str, attempts: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.attempts = attempts or []

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["attempts"] = self.attempts
        return data


class ContractError(BackendError):
    """
    Respuesta de backend que viola el contrato del host.

    `field` nombra la ruta del campo culpable; `patch_index` el parche
    cuando la violación es de la restricción de vóxeles observados.
    """

    exit_code = 3
    error_code = "contract_error"

    def __init__(self, message: str, field: Optional[str] = None, patch_index: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.patch_index = patch_index

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        if self.field is not None:
            data["field"] = self.field
        if self.patch_index is not None:
            data["patch_index"] = self.patch_index
        return data


class IntegrityError(EvoSceneError):
    """Checkpoint corrupto (checksum no coincide)."""

    error_code = "integrity_error"


class OptimizationError(EvoSceneError):
    """Pérdida no finita durante la optimización en tiempo de prueba."""

    error_code = "optimization_error"

    def __init__(self, message: str, step: int, view_id: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.view_id = view_id

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["step"] = self.step
        data["view_id"] = self.view_id
        return data
