//! Sweep grid-axis parsing: `key=start:stop:step` ranges (inclusive) or
//! `key=a,b,c` lists, with exact duplicates removed.

use staci_core::SweepGrid;

pub fn parse_axes(tokens: &[String]) -> Result<SweepGrid, String> {
    let mut grid = SweepGrid::default();
    for token in tokens {
        let (key, spec) = token
            .split_once('=')
            .ok_or_else(|| format!("grid axis {token:?} is not key=spec"))?;
        match key {
            "lambda" => grid.lambdas = parse_values(spec)?,
            "ncal" => {
                grid.n_cals = parse_values(spec)?
                    .into_iter()
                    .map(|v| {
                        if v.fract() == 0.0 && v >= 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(format!("ncal value {v} is not a nonnegative integer"))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
            }
            "gamma" => grid.gammas = parse_values(spec)?,
            other => return Err(format!("unknown grid axis {other:?} (expected lambda|ncal|gamma)")),
        }
    }
    Ok(grid)
}

fn parse_values(spec: &str) -> Result<Vec<f64>, String> {
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("range spec {spec:?} is not start:stop:step"));
        }
        let start: f64 = parse_num(parts[0])?;
        let stop: f64 = parse_num(parts[1])?;
        let step: f64 = parse_num(parts[2])?;
        if step <= 0.0 || step.is_nan() || stop < start {
            return Err(format!("range spec {spec:?} needs step > 0 and stop >= start"));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| {
                let v = start + i as f64 * step;
                // Snap accumulated rounding onto the endpoint.
                if (v - stop).abs() < step * 1e-6 {
                    stop
                } else {
                    v
                }
            })
            .collect()
    } else {
        spec.split(',').map(parse_num).collect::<Result<Vec<_>, _>>()?
    };
    Ok(dedup_exact(values))
}

fn parse_num(s: &str) -> Result<f64, String> {
    s.trim().parse().map_err(|_| format!("cannot parse number from {s:?}"))
}

fn dedup_exact(values: Vec<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(values.len());
    for v in values {
        if !out.iter().any(|u| u.to_bits() == v.to_bits()) {
            out.push(v);
        }
    }
    out
}
