import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from evoscene.errors import ConfigError
from evoscene.routers import complete, depth, loss, synthesize
from evoscene.schemas import PROTOCOL_VERSION
from evoscene.service import build_state
from evoscene.synthbench import SceneSpec, load_scene

logger = logging.getLogger(__name__)

# Cargar variables de entorno
load_dotenv()

HTTP_ERROR_CODES = {
    400: "invalid_request",
    404: "not_found",
    422: "schema_error",
    500: "internal_error",
}


def create_app(
    spec: SceneSpec,
    session_dir: Optional[Path] = None,
    depth_noise: float = 0.0,
    closing_radius: int = 2,
    seed: int = 0,
) -> FastAPI:
    """
    Crea la app del servidor mock: los tres backends oráculo (más la pérdida
    perceptual) ligados a `spec`, servidos con el protocolo evoscene-proto/1.
    """
    app = FastAPI(
        title="EvoScene mock backends",
        description=f"""
    Backends oráculo deterministas sobre el protocolo **{PROTOCOL_VERSION}**:

    - **/depth**: profundidad analítica y cámara exacta
    - **/complete**: completado morfológico de parches
    - **/synthesize**: frames renderizados de la escena de referencia
    - **/loss**: pérdida perceptual de prueba (L1)
    """,
        version="1.0.0",
        docs_url="/docs",
        redoc_url="/redoc",
    )
    app.state.service = build_state(spec, session_dir, depth_noise, closing_radius, seed)

    app.include_router(depth.router)
    app.include_router(complete.router)
    app.include_router(synthesize.router)
    app.include_router(loss.router)

    # =====================================
    # EVENTOS DE INICIALIZACIÓN
    # =====================================

    @app.on_event("startup")
    async def startup_event():
        """
        Reporta la escena cargada, el directorio de sesión y los endpoints disponibles.
        """
        state = app.state.service
        logger.info("🚀 Iniciando backends mock...")
        logger.info(f"✅ Escena '{spec.name}': {len(spec.primitives)} primitivas")
        if state.session_dir is not None:
            if not state.session_dir.is_dir():
                logger.warning(f"⚠️  Directorio de sesión {state.session_dir} no encontrado")
            else:
                logger.info(f"📁 Directorio de sesión: {state.session_dir}")
        logger.info("🎉 Endpoints disponibles: /depth, /complete, /synthesize, /loss")

    # =====================================
    # ENDPOINTS PRINCIPALES
    # =====================================

    @app.get("/", tags=["root"])
    async def root():
        """
        Endpoint raíz con la información básica del servicio.
        """
        return {
            "message": "EvoScene mock backends",
            "protocol": PROTOCOL_VERSION,
            "scene": spec.name,
            "status": "active",
            "docs": "/docs",
            "endpoints": {
                "depth": "/depth",
                "complete": "/complete",
                "synthesize": "/synthesize",
                "loss": "/loss",
            },
        }

    @app.get("/health", tags=["health"])
    async def health_check():
        """
        Health check: escena ligada y directorio de sesión accesible.
        """
        state = app.state.service
        session_ok = state.session_dir is None or state.session_dir.is_dir()
        content = {
            "status": "healthy" if session_ok else "unhealthy",
            "scene": spec.name,
            "session_dir": None if state.session_dir is None else str(state.session_dir),
        }
        return JSONResponse(status_code=200 if session_ok else 503, content=content)

    # =====================================
    # MANEJO DE ERRORES GLOBALES
    # =====================================

    @app.exception_handler(HTTPException)
    async def http_error_handler(request, exc: HTTPException):
        return JSONResponse(
            status_code=exc.status_code,
            content={
                "success": False,
                "detail": str(exc.detail),
                "error_code": HTTP_ERROR_CODES.get(exc.status_code, "http_error"),
            },
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request, exc: RequestValidationError):
        errors = exc.errors()
        field = ".".join(str(p) for p in errors[0]["loc"]) if errors else ""
        return JSONResponse(
            status_code=422,
            content={
                "success": False,
                "detail": f"Request inválido en '{field}'",
                "error_code": HTTP_ERROR_CODES[422],
            },
        )

    @app.exception_handler(404)
    async def not_found_handler(request, exc):
        """
        Manejador personalizado para errores 404.
        """
        detail = getattr(exc, "detail", None)
        return JSONResponse(
            status_code=404,
            content={
                "success": False,
                "detail": detail if detail and detail != "Not Found" else "Endpoint no encontrado",
                "error_code": HTTP_ERROR_CODES[404],
            },
        )

    @app.exception_handler(500)
    async def internal_error_handler(request, exc):
        """
        Manejador personalizado para errores internos del servidor.
        """
        return JSONResponse(
            status_code=500,
            content={
                "success": False,
                "detail": "Error interno del servidor",
                "error_code": HTTP_ERROR_CODES[500],
            },
        )

    return app


def app_from_env() -> FastAPI:
    """
    Fábrica para uvicorn: la escena sale de EVOSCENE_SCENE.
    """
    scene_path = os.getenv("EVOSCENE_SCENE")
    if not scene_path:
        raise ConfigError("EVOSCENE_SCENE no está definido")
    return create_app(load_scene(scene_path))


# =====================================
# CONFIGURACIÓN PARA DESARROLLO
# =====================================

if __name__ == "__main__":
    import uvicorn

    # Configuración desde variables de entorno
    host = os.getenv("HOST", "localhost")
    port = int(os.getenv("PORT", 8000))
    debug = os.getenv("DEBUG", "true").lower() == "true"

    print(f"🚀 Iniciando servidor en http://{host}:{port}")

    uvicorn.run(
        "evoscene.main:app_from_env",
        factory=True,
        host=host,
        port=port,
        reload=debug,
        access_log=debug,
    )
