from __future__ import annotations
import yaml
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal, Mapping

from logic.modelos import ModelSpec, OptimizerBudget


RUTA_CONFIG_DEFAULT = Path(__file__).resolve().parent.parent / "config.yaml"
MODOS = ("shared-data", "multi-site")


class ErrorConfiguracion(ValueError):
    pass


@dataclass(frozen=True)
class AppConfig:
    nombre: str
    version: str
    formato_float: str


@dataclass(frozen=True)
class DestilacionConfig:
    alfa: float
    eps_fit: float
    factor_cobertura: float
    lambda_inicio: float
    lambda_factor: float
    lambda_tope: float
    lambda_sondas: int


@dataclass(frozen=True)
class LecturaConfig:
    csv_encodings: list[str]
    csv_separadores: list[str]


@dataclass(frozen=True)
class Config:
    app: AppConfig
    destilacion: DestilacionConfig
    optimizacion: OptimizerBudget
    lectura: LecturaConfig


def load_config(path: str | Path | None = None) -> Config:
    with open(path or RUTA_CONFIG_DEFAULT, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)

    app = AppConfig(**data["app"])
    dest = DestilacionConfig(**data["destilacion"])
    opt = OptimizerBudget(**data["optimizacion"])
    lec = LecturaConfig(**data["lectura"])

    return Config(app=app, destilacion=dest, optimizacion=opt, lectura=lec)


# ==========================================================
# Experimentos
# ==========================================================
@dataclass(frozen=True)
class PoliticaLambda:
    politica: Literal["fija", "busqueda"] = "busqueda"
    valor: float = 1.0
    inicio: float = 1.0
    factor: float = 2.0
    tope: float = 1024.0
    sondas: int = 5


@dataclass(frozen=True)
class ParticipanteConfig:
    nombre: str
    datos: Path
    modelo: ModelSpec | None = None
    modelo_archivo: Path | None = None
    esquema: Path | None = None
    categoricas: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    participantes: tuple[ParticipanteConfig, ...]
    columna_clase: str
    prueba: Path
    modo: str = "shared-data"
    alfa: float = 0.5
    semilla: int = 0
    hilos: int = 1
    eps_fit: float = 0.01
    lambda_: PoliticaLambda = field(default_factory=PoliticaLambda)
    presupuesto: OptimizerBudget = field(default_factory=OptimizerBudget)
    dedup_activo: bool = False
    radio_dedup: float | None = None      # None: factor_cobertura * d
    factor_cobertura: float = 0.05
    fraccion_mascara: float | None = None
    incluir_no_convergidos: bool = False
    linea_base_agrupada: bool = False
    max_fraccion_faltantes: float | None = None
    salida: Path = Path("reporte")

    def __post_init__(self) -> None:
        validar_experimento(self)

    @property
    def nombres(self) -> tuple[str, ...]:
        return tuple(p.nombre for p in self.participantes)

    def como_dict(self) -> dict[str, Any]:
        """Configuración resuelta (rutas absolutas), apta para el manifiesto."""
        parts = []
        for p in self.participantes:
            d: dict[str, Any] = {"nombre": p.nombre, "datos": str(p.datos)}
            if p.modelo is not None:
                d["modelo"] = p.modelo.como_dict()
            if p.modelo_archivo is not None:
                d["modelo_archivo"] = str(p.modelo_archivo)
            if p.esquema is not None:
                d["esquema"] = str(p.esquema)
            if p.categoricas:
                d["categoricas"] = list(p.categoricas)
            parts.append(d)
        return {
            "modo": self.modo,
            "alfa": self.alfa,
            "semilla": self.semilla,
            "hilos": self.hilos,
            "columna_clase": self.columna_clase,
            "prueba": str(self.prueba),
            "eps_fit": self.eps_fit,
            "lambda": {f.name: getattr(self.lambda_, f.name) for f in fields(self.lambda_)},
            "presupuesto": {f.name: getattr(self.presupuesto, f.name) for f in fields(self.presupuesto)},
            "dedup": {
                "activo": self.dedup_activo,
                "radio": "auto" if self.radio_dedup is None else self.radio_dedup,
                "factor_cobertura": self.factor_cobertura,
            },
            "mascara": {"fraccion": self.fraccion_mascara},
            "incluir_no_convergidos": self.incluir_no_convergidos,
            "linea_base_agrupada": self.linea_base_agrupada,
            "max_fraccion_faltantes": self.max_fraccion_faltantes,
            "salida": str(self.salida),
            "participantes": parts,
        }


def validar_experimento(cfg: ExperimentConfig) -> None:
    if len(cfg.participantes) < 2:
        raise ErrorConfiguracion("Se requieren >= 2 participantes.")
    nombres = [p.nombre for p in cfg.participantes]
    if len(set(nombres)) != len(nombres):
        raise ErrorConfiguracion(f"Nombres de participante repetidos: {nombres}")
    for p in cfg.participantes:
        if (p.modelo is None) == (p.modelo_archivo is None):
            raise ErrorConfiguracion(
                f"Participante '{p.nombre}': indicar exactamente uno de 'modelo' o 'modelo_archivo'."
            )
    if cfg.modo not in MODOS:
        raise ErrorConfiguracion(f"Modo desconocido '{cfg.modo}' (opciones: {', '.join(MODOS)})")
    if not 0.0 <= cfg.alfa <= 1.0:
        raise ErrorConfiguracion(f"alfa debe estar en [0, 1] (recibido {cfg.alfa})")
    if cfg.hilos < 1:
        raise ErrorConfiguracion("hilos debe ser >= 1.")
    if cfg.eps_fit <= 0:
        raise ErrorConfiguracion("eps_fit debe ser > 0.")
    if cfg.radio_dedup is not None and cfg.radio_dedup < 0:
        raise ErrorConfiguracion("El radio de dedup debe ser >= 0.")
    if cfg.fraccion_mascara is not None and not 0.0 < cfg.fraccion_mascara <= 1.0:
        raise ErrorConfiguracion("mascara.fraccion debe estar en (0, 1].")
    lam = cfg.lambda_
    if lam.politica not in ("fija", "busqueda"):
        raise ErrorConfiguracion(f"Política de lambda desconocida '{lam.politica}'")
    if lam.valor <= 0 or lam.inicio <= 0 or lam.factor <= 1 or lam.tope < lam.inicio or lam.sondas < 1:
        raise ErrorConfiguracion("Parámetros de lambda inválidos.")


def _ruta(base: Path, valor: Any) -> Path:
    p = Path(str(valor))
    return p if p.is_absolute() else (base / p).resolve()


def _participante(base: Path, data: Mapping[str, Any]) -> ParticipanteConfig:
    try:
        modelo = ModelSpec.desde_dict(data["modelo"]) if data.get("modelo") is not None else None
    except (TypeError, ValueError) as e:
        raise ErrorConfiguracion(f"Participante '{data.get('nombre')}': {e}") from e
    return ParticipanteConfig(
        nombre=str(data["nombre"]),
        datos=_ruta(base, data["datos"]),
        modelo=modelo,
        modelo_archivo=_ruta(base, data["modelo_archivo"]) if data.get("modelo_archivo") else None,
        esquema=_ruta(base, data["esquema"]) if data.get("esquema") else None,
        categoricas=tuple(data.get("categoricas") or ()),
    )


def experimento_desde_dict(
    data: Mapping[str, Any],
    base: Path,
    cfg: Config | None = None,
) -> ExperimentConfig:
    cfg = cfg or load_config()
    d = cfg.destilacion
    try:
        lam_data = dict(data.get("lambda") or {})
        lam = PoliticaLambda(
            politica=lam_data.pop("politica", "busqueda"),
            valor=float(lam_data.pop("valor", d.lambda_inicio)),
            inicio=float(lam_data.pop("inicio", d.lambda_inicio)),
            factor=float(lam_data.pop("factor", d.lambda_factor)),
            tope=float(lam_data.pop("tope", d.lambda_tope)),
            sondas=int(lam_data.pop("sondas", d.lambda_sondas)),
        )
        if lam_data:
            raise ErrorConfiguracion(f"Claves de lambda desconocidas: {sorted(lam_data)}")

        presupuesto = replace(cfg.optimizacion, **(data.get("presupuesto") or {}))
        dedup = data.get("dedup") or {}
        radio = dedup.get("radio", "auto")
        mascara = data.get("mascara") or {}

        return ExperimentConfig(
            participantes=tuple(_participante(base, p) for p in data.get("participantes") or ()),
            columna_clase=str(data["columna_clase"]),
            prueba=_ruta(base, data["prueba"]),
            modo=data.get("modo", "shared-data"),
            alfa=float(data.get("alfa", d.alfa)),
            semilla=int(data.get("semilla", 0)),
            hilos=int(data.get("hilos", 1)),
            eps_fit=float(data.get("eps_fit", d.eps_fit)),
            lambda_=lam,
            presupuesto=presupuesto,
            dedup_activo=bool(dedup.get("activo", False)),
            radio_dedup=None if radio in (None, "auto") else float(radio),
            factor_cobertura=float(dedup.get("factor_cobertura", d.factor_cobertura)),
            fraccion_mascara=None if mascara.get("fraccion") is None else float(mascara["fraccion"]),
            incluir_no_convergidos=bool(data.get("incluir_no_convergidos", False)),
            linea_base_agrupada=bool(data.get("linea_base_agrupada", False)),
            max_fraccion_faltantes=data.get("max_fraccion_faltantes"),
            salida=_ruta(base, data.get("salida", "reporte")),
        )
    except KeyError as e:
        raise ErrorConfiguracion(f"Falta la clave obligatoria {e} en la configuración") from e
    except TypeError as e:
        raise ErrorConfiguracion(f"Configuración inválida: {e}") from e
    except ValueError as e:
        if isinstance(e, ErrorConfiguracion):
            raise
        raise ErrorConfiguracion(str(e)) from e


def load_experimento(
    path: str | Path,
    cfg: Config | None = None,
    semilla: int | None = None,
    hilos: int | None = None,
) -> ExperimentConfig:
    """Lee un experimento YAML (o el manifiesto de una corrida anterior)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ErrorConfiguracion(f"{path}: se esperaba un mapeo YAML")
    if "configuracion" in data:
        data = data["configuracion"]

    exp = experimento_desde_dict(data, path.resolve().parent, cfg)
    if semilla is not None:
        exp = replace(exp, semilla=semilla)
    if hilos is not None:
        exp = replace(exp, hilos=hilos)
    return exp
