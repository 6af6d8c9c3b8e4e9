use super::types::{ContextElement, EntityRef, GridCell, QueryRequest, Registration, Scope};

/// Glob match where `*` stands for any (possibly empty) run of characters.
pub fn glob_match(pattern: &str, candidate: &str) -> bool {
    let p = pattern.as_bytes();
    let c = candidate.as_bytes();
    let (mut pi, mut ci) = (0usize, 0usize);
    let mut backtrack: Option<(usize, usize)> = None;
    while ci < c.len() {
        if pi < p.len() && p[pi] == b'*' {
            backtrack = Some((pi, ci));
            pi += 1;
        } else if pi < p.len() && p[pi] == c[ci] {
            pi += 1;
            ci += 1;
        } else if let Some((star, matched)) = backtrack {
            pi = star + 1;
            ci = matched + 1;
            backtrack = Some((star, matched + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&b| b == b'*')
}

/// Does `pattern` select the concrete entity `candidate`?
pub fn match_entity(pattern: &EntityRef, candidate: &EntityRef) -> bool {
    let type_ok = pattern.entity_type == "*" || pattern.entity_type == candidate.entity_type;
    if !type_ok {
        return false;
    }
    if pattern.is_pattern {
        glob_match(&pattern.id, &candidate.id)
    } else {
        pattern.id == candidate.id
    }
}

/// Symmetric overlap test for two references that may both be patterns.
pub fn entities_overlap(a: &EntityRef, b: &EntityRef) -> bool {
    let type_ok = a.entity_type == "*"
        || b.entity_type == "*"
        || a.entity_type == b.entity_type;
    if !type_ok {
        return false;
    }
    a.id == b.id
        || (a.is_pattern && glob_match(&a.id, &b.id))
        || (b.is_pattern && glob_match(&b.id, &a.id))
}

fn attributes_compatible(requested: &[String], offered: &[String]) -> bool {
    requested.is_empty()
        || offered.is_empty()
        || requested.iter().any(|name| offered.contains(name))
}

pub fn match_registration(query: &QueryRequest, reg: &Registration) -> bool {
    let entity_hit = query
        .entities
        .iter()
        .any(|q| reg.entities.iter().any(|r| entities_overlap(q, r)));
    entity_hit
        && attributes_compatible(&query.attribute_names, &reg.attribute_names)
        && match &query.scope {
            None => true,
            Some(scope) => scopes_overlap(scope, &reg.scope),
        }
}

/// Area overlap between two scopes. `None` on either side is unconstrained.
/// Named regions compare by name; a region against a geometric scope cannot
/// be resolved without a lookup table and is treated as overlapping.
pub fn scopes_overlap(a: &Scope, b: &Scope) -> bool {
    match (a, b) {
        (Scope::None, _) | (_, Scope::None) => true,
        (Scope::ExactPoint(p), Scope::ExactPoint(q)) => p == q,
        (Scope::ExactPoint(p), Scope::GridCell(cell)) | (Scope::GridCell(cell), Scope::ExactPoint(p)) => {
            let snapped = GridCell::containing(*p, cell.cell_size);
            snapped.lat_index == cell.lat_index && snapped.lon_index == cell.lon_index
        }
        (Scope::GridCell(x), Scope::GridCell(y)) => {
            if x.cell_size == y.cell_size {
                x.lat_index == y.lat_index && x.lon_index == y.lon_index
            } else {
                let (xa, xb, xc, xd) = x.bounds();
                let (ya, yb, yc, yd) = y.bounds();
                xa < yb && ya < xb && xc < yd && yc < xd
            }
        }
        (Scope::NamedRegion(x), Scope::NamedRegion(y)) => x == y,
        (Scope::NamedRegion(_), _) | (_, Scope::NamedRegion(_)) => true,
    }
}

/// Keep only the attributes named in `allowed`; an empty list keeps all.
pub fn filter_attributes(element: &ContextElement, allowed: &[String]) -> ContextElement {
    if allowed.is_empty() {
        return element.clone();
    }
    ContextElement {
        entity: element.entity.clone(),
        attributes: element
            .attributes
            .iter()
            .filter(|a| allowed.iter().any(|name| name == &a.name))
            .cloned()
            .collect(),
        provider_hint: element.provider_hint.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::types::{Attribute, GeoPoint};

    fn reg(entities: Vec<EntityRef>, attrs: &[&str], scope: Scope) -> Registration {
        Registration {
            registration_id: "r".into(),
            version: 1,
            providing_endpoint: "http://127.0.0.1:1".into(),
            entities,
            attribute_names: attrs.iter().map(|s| s.to_string()).collect(),
            scope,
            ttl: 300,
        }
    }

    #[test]
    fn glob_cases() {
        assert!(glob_match("car-*", "car-7"));
        assert!(glob_match("*", ""));
        assert!(glob_match("a*b*c", "axxbyyc"));
        assert!(!glob_match("a*b*c", "axxbyy"));
        assert!(glob_match("**", "abc"));
        assert!(!glob_match("car-7", "car-77"));
        assert!(glob_match("*7", "car-77"));
    }

    #[test]
    fn match_entity_examples() {
        let car7 = EntityRef::new("car-7", "Car");
        assert!(match_entity(&EntityRef::pattern("car-*", "Car"), &car7));
        assert!(!match_entity(
            &EntityRef::new("car-7", "Car"),
            &EntityRef::new("car-7", "Bike")
        ));
        assert!(match_entity(&EntityRef::any(), &car7));
        assert!(match_entity(&EntityRef::any(), &EntityRef::new("x", "Y")));
    }

    #[test]
    fn non_pattern_star_is_literal() {
        assert!(!match_entity(&EntityRef::new("*", "Car"), &EntityRef::new("car-7", "Car")));
    }

    #[test]
    fn match_registration_examples() {
        let q = QueryRequest::new(vec![EntityRef::pattern("*", "Temperature")], vec!["value".into()]);
        let r = reg(vec![EntityRef::pattern("*", "Temperature")], &[], Scope::None);
        assert!(match_registration(&q, &r));

        let q = QueryRequest::new(vec![EntityRef::any()], vec!["humidity".into()]);
        let r = reg(vec![EntityRef::any()], &["temp"], Scope::None);
        assert!(!match_registration(&q, &r));

        let cell = |lat, lon| {
            Scope::GridCell(GridCell {
                lat_index: lat,
                lon_index: lon,
                cell_size: 0.1,
            })
        };
        let mut q = QueryRequest::new(vec![EntityRef::any()], vec![]);
        q.scope = Some(cell(5, 3));
        assert!(!match_registration(&q, &reg(vec![EntityRef::any()], &[], cell(5, 4))));
        assert!(match_registration(&q, &reg(vec![EntityRef::any()], &[], cell(5, 3))));
    }

    #[test]
    fn both_sides_patterns() {
        let q = QueryRequest::new(vec![EntityRef::new("car-7", "Car")], vec![]);
        let r = reg(vec![EntityRef::pattern("*", "*")], &[], Scope::None);
        assert!(match_registration(&q, &r));
        let q = QueryRequest::new(vec![EntityRef::pattern("car-*", "Car")], vec![]);
        let r = reg(vec![EntityRef::new("car-9", "Car")], &[], Scope::None);
        assert!(match_registration(&q, &r));
        let r = reg(vec![EntityRef::new("bus-9", "Car")], &[], Scope::None);
        assert!(!match_registration(&q, &r));
    }

    #[test]
    fn point_snaps_to_grid() {
        let p = Scope::ExactPoint(GeoPoint::new(44.101, 9.823));
        let c = Scope::GridCell(GridCell {
            lat_index: 441,
            lon_index: 98,
            cell_size: 0.1,
        });
        assert!(scopes_overlap(&p, &c));
        assert!(scopes_overlap(&c, &p));
        let other = Scope::GridCell(GridCell {
            lat_index: 441,
            lon_index: 99,
            cell_size: 0.1,
        });
        assert!(!scopes_overlap(&p, &other));
    }

    #[test]
    fn nested_cells_overlap() {
        let coarse = Scope::GridCell(GridCell {
            lat_index: 44,
            lon_index: 9,
            cell_size: 1.0,
        });
        let fine = Scope::GridCell(GridCell {
            lat_index: 441,
            lon_index: 98,
            cell_size: 0.1,
        });
        assert!(scopes_overlap(&coarse, &fine));
    }

    #[test]
    fn filter_examples() {
        let e = ContextElement::new(
            EntityRef::new("e", "T"),
            vec![
                Attribute::number("a", 1.0, 1),
                Attribute::number("b", 2.0, 1),
                Attribute::number("c", 3.0, 1),
            ],
        );
        let f = filter_attributes(&e, &["a".into(), "c".into()]);
        let names: Vec<_> = f.attributes.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["a", "c"]);

        let f = filter_attributes(&e, &["z".into()]);
        assert!(f.attributes.is_empty());
        assert_eq!(f.entity, e.entity);

        assert_eq!(filter_attributes(&e, &[]), e);
    }

    #[test]
    fn filter_hundred_keeps_twenty() {
        let attrs: Vec<_> = (0..100).map(|i| Attribute::number(format!("a{i}"), i as f64, 1)).collect();
        let e = ContextElement::new(EntityRef::new("e", "T"), attrs);
        let allowed: Vec<String> = (0..100).step_by(5).map(|i| format!("a{i}")).collect();
        let oracle: std::collections::BTreeSet<_> = e
            .attributes
            .iter()
            .map(|a| a.name.clone())
            .filter(|n| allowed.contains(n))
            .collect();
        let f = filter_attributes(&e, &allowed);
        assert_eq!(f.attributes.len(), 20);
        let got: std::collections::BTreeSet<_> = f.attributes.iter().map(|a| a.name.clone()).collect();
        assert_eq!(got, oracle);
    }
}
