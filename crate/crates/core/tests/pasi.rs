use proptest::prelude::*;
use psonet_core::pasi::{
    regional_pasi, total_from_regions, total_pasi, PerRegion, Region, RegionalPasi,
    SeverityComponents, PASI_MAX,
};

fn oracle_regional(e: u8, i: u8, d: u8, a: u8) -> f64 {
    let mut s = 0.0;
    for v in [e, i, d] {
        s += v as f64;
    }
    s * a as f64
}

fn oracle_weight(region: Region) -> f64 {
    match region {
        Region::HeadNeck => 0.1,
        Region::UpperExtremities => 0.2,
        Region::LowerExtremities => 0.4,
        Region::Trunk => 0.3,
    }
}

#[test]
fn every_ordinal_tuple_matches_oracle() {
    let mut checked = 0;
    for region in Region::ALL {
        for e in 0..=4 {
            for i in 0..=4 {
                for d in 0..=4 {
                    for a in 0..=6 {
                        let c = SeverityComponents::new(e, i, d, a).unwrap();
                        let got = regional_pasi(&c, region).unwrap();
                        assert_eq!(got.value, oracle_regional(e, i, d, a));
                        assert_eq!(got.region, region);
                        checked += 1;
                    }
                }
            }
        }
    }
    assert_eq!(checked, 4 * 875);
}

#[test]
fn maximal_components_total_72() {
    let c = SeverityComponents::new(4, 4, 4, 6).unwrap();
    let regional: Vec<RegionalPasi> = Region::ALL
        .iter()
        .map(|&r| regional_pasi(&c, r).unwrap())
        .collect();
    assert!(regional.iter().all(|r| r.value == 72.0));
    assert_eq!(total_pasi(&regional).unwrap().value, PASI_MAX);
}

#[test]
fn out_of_range_ordinals_rejected() {
    assert!(SeverityComponents::new(5, 0, 0, 0).is_err());
    assert!(SeverityComponents::new(0, 0, 0, 7).is_err());
    let raw = SeverityComponents {
        erythema: 0,
        induration: 9,
        desquamation: 0,
        area_score: 1,
    };
    assert!(regional_pasi(&raw, Region::Trunk).is_err());
}

#[test]
fn incomplete_or_duplicate_regions_rejected() {
    let one = |r| RegionalPasi {
        region: r,
        value: 1.0,
    };
    assert!(total_pasi(&[one(Region::HeadNeck)]).is_err());
    let dup = [
        one(Region::HeadNeck),
        one(Region::HeadNeck),
        one(Region::UpperExtremities),
        one(Region::LowerExtremities),
        one(Region::Trunk),
    ];
    assert!(total_pasi(&dup).is_err());
    let bad = [
        RegionalPasi {
            region: Region::HeadNeck,
            value: 73.0,
        },
        one(Region::UpperExtremities),
        one(Region::LowerExtremities),
        one(Region::Trunk),
    ];
    assert!(total_pasi(&bad).is_err());
}

fn components() -> impl Strategy<Value = (u8, u8, u8, u8)> {
    (0u8..=4, 0u8..=4, 0u8..=4, 0u8..=6)
}

proptest! {
    #[test]
    fn regional_bounded((e, i, d, a) in components()) {
        let v = regional_pasi(&SeverityComponents::new(e, i, d, a).unwrap(), Region::Trunk).unwrap().value;
        prop_assert!((0.0..=72.0).contains(&v));
    }

    #[test]
    fn regional_monotone_in_each_component((e, i, d, a) in components(), which in 0usize..4) {
        let base = SeverityComponents::new(e, i, d, a).unwrap();
        let mut up = base;
        let (field, max) = match which {
            0 => (&mut up.erythema, 4),
            1 => (&mut up.induration, 4),
            2 => (&mut up.desquamation, 4),
            _ => (&mut up.area_score, 6),
        };
        prop_assume!(*field < max);
        *field += 1;
        let lo = regional_pasi(&base, Region::HeadNeck).unwrap().value;
        let hi = regional_pasi(&up, Region::HeadNeck).unwrap().value;
        prop_assert!(hi >= lo);
    }

    #[test]
    fn total_is_weighted_sum(values in prop::array::uniform4(0.0f64..=72.0)) {
        let table = PerRegion(values);
        let got = total_from_regions(&table).unwrap().value;
        let want: f64 = Region::ALL.iter().map(|&r| oracle_weight(r) * table[r]).sum();
        prop_assert!((got - want).abs() < 1e-9);
        prop_assert!((0.0..=72.0 + 1e-9).contains(&got));
    }

    #[test]
    fn total_monotone(values in prop::array::uniform4(0.0f64..=70.0), which in 0usize..4, bump in 0.0f64..2.0) {
        let base = PerRegion(values);
        let mut up = base.clone();
        up.0[which] += bump;
        let lo = total_from_regions(&base).unwrap().value;
        let hi = total_from_regions(&up).unwrap().value;
        prop_assert!(hi >= lo);
    }
}
