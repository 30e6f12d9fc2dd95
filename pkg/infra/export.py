from __future__ import annotations
import io
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import pandas as pd
import yaml
from openpyxl.styles import numbers

from logic.espacio import decode
from logic.modelos import CounterfactualRecord, DatasetSchema, DistillationReport, EntradaDelta, LabelSpace


ARCHIVO_METRICAS = "metrics.csv"
ARCHIVO_CONTEOS = "count_matrix.csv"
ARCHIVO_AGRUPADO = "pooled.csv"
ARCHIVO_REGISTROS = "counterfactuals.csv"
ARCHIVO_MANIFIESTO = "manifest.yaml"

COLUMNAS_REGISTRO = ("teacher", "student", "source_dataset", "source_index", "converged", "fit", "distance")


def escribir_atomico(path: str | Path, contenido: str | bytes) -> Path:
    """Escribe en un temporal del mismo directorio y renombra: nunca deja archivos truncados."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = contenido.encode("utf-8") if isinstance(contenido, str) else contenido
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_texto(df: pd.DataFrame, formato_float: str = "%.6f") -> str:
    return df.to_csv(index=False, float_format=formato_float, lineterminator="\n")


# ==========================================================
# Tablas del reporte
# ==========================================================
def tabla_metricas(reporte: DistillationReport) -> pd.DataFrame:
    return pd.DataFrame({
        "model": list(reporte.modelos),
        "accuracy_before": [reporte.exactitud_antes[m] for m in reporte.modelos],
        "accuracy_after": [reporte.exactitud_despues[m] for m in reporte.modelos],
    })


def tabla_conteos(reporte: DistillationReport) -> pd.DataFrame:
    """Filas alumnos, columnas maestros."""
    df = pd.DataFrame(reporte.conteos.astype(int), columns=list(reporte.modelos))
    df.insert(0, "student", list(reporte.modelos))
    return df


def tabla_agrupada(reporte: DistillationReport) -> pd.DataFrame | None:
    if reporte.exactitud_agrupada is None:
        return None
    return pd.DataFrame({
        "model": list(reporte.modelos),
        "accuracy_before": [reporte.exactitud_antes[m] for m in reporte.modelos],
        "accuracy_after": [reporte.exactitud_despues[m] for m in reporte.modelos],
        "accuracy_pooled": [reporte.exactitud_agrupada[m] for m in reporte.modelos],
        "distilled_instances": [reporte.recibidos(m) for m in reporte.modelos],
    })


def tabla_delta(entrada: EntradaDelta, atributos: Sequence[str]) -> pd.DataFrame:
    filas: list[dict[str, Any]] = []
    for k, clase in enumerate(entrada.clases):
        fila: dict[str, Any] = {"row": f"delta[{clase}]", "count": entrada.conteos[k], "empty": entrada.vacias[k]}
        fila.update(zip(atributos, entrada.medias[k]))
        filas.append(fila)
    if entrada.diferencia is not None:
        fila = {"row": "delta_pos_minus_neg", "count": sum(entrada.conteos), "empty": all(entrada.vacias)}
        fila.update(zip(atributos, entrada.diferencia))
        filas.append(fila)
    return pd.DataFrame(filas, columns=["row", "count", "empty", *atributos])


def tabla_registros(
    registros: Iterable[CounterfactualRecord],
    esquemas: Mapping[str, DatasetSchema],
    label_space: LabelSpace,
) -> pd.DataFrame:
    """Volcado legible: contrafactuales decodificados en el esquema de su alumno."""
    filas = []
    for r in registros:
        fila: dict[str, Any] = {
            "teacher": r.maestro,
            "student": r.alumno,
            "source_dataset": r.dataset,
            "source_index": r.indice,
            "converged": r.convergio,
            "fit": r.ajuste,
            "distance": r.distancia,
        }
        fila.update(decode(esquemas[r.alumno], r.x_prima))
        fila["label"] = label_space.classes[r.etiqueta]
        filas.append(fila)
    if not filas:
        return pd.DataFrame(columns=[*COLUMNAS_REGISTRO, "label"])
    return pd.DataFrame(filas)


def nombre_delta(maestro: str, alumno: str) -> str:
    return f"delta_{maestro}__{alumno}.csv"


def escribir_reporte(
    reporte: DistillationReport,
    directorio: str | Path,
    formato_float: str = "%.6f",
    registros_csv: pd.DataFrame | None = None,
) -> list[Path]:
    directorio = Path(directorio)
    escritos = [
        escribir_atomico(directorio / ARCHIVO_METRICAS, csv_texto(tabla_metricas(reporte), formato_float)),
        escribir_atomico(directorio / ARCHIVO_CONTEOS, csv_texto(tabla_conteos(reporte), formato_float)),
    ]
    for entrada in reporte.deltas:
        df = tabla_delta(entrada, reporte.atributos[entrada.alumno])
        escritos.append(escribir_atomico(directorio / nombre_delta(entrada.maestro, entrada.alumno),
                                         csv_texto(df, formato_float)))
    agrupada = tabla_agrupada(reporte)
    if agrupada is not None:
        escritos.append(escribir_atomico(directorio / ARCHIVO_AGRUPADO, csv_texto(agrupada, formato_float)))
    if registros_csv is not None:
        escritos.append(escribir_atomico(directorio / ARCHIVO_REGISTROS, csv_texto(registros_csv, formato_float)))
    return escritos


def escribir_manifiesto(directorio: str | Path, manifiesto: Mapping[str, Any]) -> Path:
    texto = yaml.safe_dump(dict(manifiesto), sort_keys=False, allow_unicode=True)
    return escribir_atomico(Path(directorio) / ARCHIVO_MANIFIESTO, texto)


# ==========================================================
# Lectura y exportacion de reportes existentes
# ==========================================================
def leer_reporte(directorio: str | Path) -> dict[str, pd.DataFrame]:
    directorio = Path(directorio)
    if not (directorio / ARCHIVO_METRICAS).is_file():
        raise FileNotFoundError(f"{directorio} no contiene {ARCHIVO_METRICAS}")
    out = {}
    for path in sorted(directorio.glob("*.csv")):
        out[path.stem] = pd.read_csv(path)
    return out


def reporte_a_excel_bytes(tablas: Mapping[str, pd.DataFrame]) -> bytes:
    """Exporta las tablas de un reporte a un libro Excel, una hoja por tabla.

    Las columnas de exactitud quedan con formato de porcentaje.
    """
    buff = io.BytesIO()
    with pd.ExcelWriter(buff, engine="openpyxl") as writer:
        for nombre, df in tablas.items():
            hoja = nombre[:31]
            df.to_excel(writer, index=False, sheet_name=hoja)
            ws = writer.sheets[hoja]
            headers = [c.value for c in ws[1]]
            for col_idx, header in enumerate(headers, start=1):
                if str(header).startswith("accuracy"):
                    col_letter = ws.cell(row=1, column=col_idx).column_letter
                    for cell in ws[col_letter][1:]:
                        cell.number_format = numbers.FORMAT_PERCENTAGE_00
    return buff.getvalue()
