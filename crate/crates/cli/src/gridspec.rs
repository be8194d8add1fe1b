//! Rate-grid specifications: `lo:step:hi` ranges (inclusive) or
//! comma-separated value lists.

pub fn parse(spec: &str) -> Result<Vec<f64>, String> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Err("empty grid spec".into());
    }
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("range spec must be lo:step:hi, got {spec:?}"));
        }
        let lo: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| format!("bad range start {:?}", parts[0]))?;
        let step: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| format!("bad range step {:?}", parts[1]))?;
        let hi: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| format!("bad range end {:?}", parts[2]))?;
        if step <= 0.0 || hi < lo {
            return Err(format!("range spec {spec:?} is empty or descending"));
        }
        let count = ((hi - lo) / step).round() as usize;
        let mut out = Vec::with_capacity(count + 1);
        for i in 0..=count {
            let v = lo + step * i as f64;
            if v <= hi + 1e-12 {
                // snap near-integers of the step grid to kill float drift
                out.push((v * 1e12).round() / 1e12);
            }
        }
        Ok(out)
    } else {
        spec.split(',')
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("bad grid value {cell:?}"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_inclusive() {
        let g = parse("0:0.1:1").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert_eq!(g[3], 0.3);
    }

    #[test]
    fn list_values() {
        let g = parse("0.001, 0.01,0.1").unwrap();
        assert_eq!(g, vec![0.001, 0.01, 0.1]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse("").is_err());
        assert!(parse("1:0:2").is_err());
        assert!(parse("a,b").is_err());
        assert!(parse("0:0.1").is_err());
    }
}
