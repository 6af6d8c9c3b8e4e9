use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use liots_core::model::{Attribute, ContextElement, EntityRef};

pub const ENTITY_TYPE: &str = "Sensor";

pub fn entity_id(i: usize) -> String {
    format!("e-{i}")
}

pub fn attribute_name(j: usize) -> String {
    format!("a{j}")
}

/// The seeded dataset, also serving as the brute-force oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedData {
    pub elements: Vec<ContextElement>,
    index: HashMap<String, usize>,
}

impl SeedData {
    /// Entities e-0..e-(total-1), each with `attributes` numeric values
    /// drawn from a generator seeded with `seed`.
    pub fn generate(seed: u64, total: usize, attributes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let elements: Vec<ContextElement> = (0..total)
            .map(|i| {
                let attrs = (0..attributes)
                    .map(|j| Attribute::number(attribute_name(j), rng.gen_range(0.0..1000.0), 1))
                    .collect();
                ContextElement::new(EntityRef::new(entity_id(i), ENTITY_TYPE), attrs)
            })
            .collect();
        let index = elements
            .iter()
            .enumerate()
            .map(|(i, e)| (e.entity.id.clone(), i))
            .collect();
        Self { elements, index }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ContextElement> {
        self.index.get(id).map(|&i| &self.elements[i])
    }

    /// Disjoint contiguous partitions of `each` entities.
    pub fn partitions(&self, each: usize) -> Vec<Vec<ContextElement>> {
        self.elements.chunks(each.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Whether `element` carries exactly the seeded values for the
    /// attributes it lists.
    pub fn agrees_with(&self, element: &ContextElement) -> bool {
        let Some(expected) = self.get(&element.entity.id) else {
            return false;
        };
        element.entity == expected.entity
            && element
                .attributes
                .iter()
                .all(|a| expected.attribute(&a.name) == Some(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = serde_json::to_vec(&SeedData::generate(7, 50, 10).elements).unwrap();
        let b = serde_json::to_vec(&SeedData::generate(7, 50, 10).elements).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&SeedData::generate(8, 50, 10).elements).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        let data = SeedData::generate(1, 1000, 2);
        let parts = data.partitions(100);
        assert_eq!(parts.len(), 10);
        let mut ids: Vec<&str> = parts.iter().flatten().map(|e| e.entity.id.as_str()).collect();
        assert!(parts.iter().all(|p| p.len() == 100));
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn oracle_spots_altered_values() {
        let data = SeedData::generate(3, 5, 4);
        let mut e = data.elements[2].clone();
        assert!(data.agrees_with(&e));
        e.attributes[1] = Attribute::number("a1", -1.0, 1);
        assert!(!data.agrees_with(&e));
    }
}
